//! Desk-scale training of the refiner and the fusion gate on synthetic
//! scenes. The backbone stays frozen (its outputs are read-only inputs and a
//! checksum asserts they never change). Gradients flow from an L1 loss at
//! the valid core pixels through the gate, the confidence-logit entropy, and
//! the sparse U-net; the optimizer keeps bias-corrected first/second moment
//! estimates per parameter.

use crate::dense::{entropy_of_logits, entropy_of_logits_backward, DenseMap, ValidityMask};
use crate::error::{Error, Result};
use crate::fusion::{fusion_backward, gated_fuse, FusionParams};
use crate::pipeline::{prepare_inputs, SelectorKind};
use crate::refiner::{
    backward_from_trace, forward_with_trace, RefinerConfig, RefinerParams, RefinerPlan,
};
use crate::select::{assemble_sparse_input, PixelSelection};
use crate::sparse::{MaddCounter, SparseTensor};
use crate::synth::{BackboneOutput, SceneSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learn_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub alpha: f64,
    pub halo: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            learn_rate: 1e-3,
            seed: 0,
            loss: LossKind::L1,
            alpha: 0.3,
            halo: 1,
        }
    }
}

/// Loss summary of one fused map against ground truth.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub per_pixel_count: usize,
    pub selected_rmse: f64,
    pub full_rmse: f64,
}

/// Mean absolute error over valid core pixels (summed over channels), plus
/// RMSE on the selected pixels and on the full map.
pub fn refine_loss(
    fused: &DenseMap,
    gt: &DenseMap,
    mask: &ValidityMask,
    sel: &PixelSelection,
) -> Result<LossReport> {
    if !fused.same_shape(gt) || fused.height() != mask.height() || fused.width() != mask.width() {
        return Err(Error::invalid_argument(
            "refine_loss dimension mismatch".to_string(),
        ));
    }
    let c = fused.channels();
    let mut total = 0.0f64;
    let mut sel_sq = 0.0f64;
    let mut n_core = 0usize;
    for &(r, col) in &sel.core_coords() {
        let (r, col) = (r as usize, col as usize);
        if !mask.get(r, col) {
            continue;
        }
        n_core += 1;
        for ch in 0..c {
            let d = fused.get(r, col, ch) - gt.get(r, col, ch);
            total += d.abs();
            sel_sq += d * d;
        }
    }
    if n_core == 0 {
        return Err(Error::EmptyEvaluation(
            "no valid core pixels to supervise".to_string(),
        ));
    }
    let mut full_sq = 0.0f64;
    let mut n_full = 0usize;
    for r in 0..fused.height() {
        for col in 0..fused.width() {
            if !mask.get(r, col) {
                continue;
            }
            n_full += 1;
            for ch in 0..c {
                let d = fused.get(r, col, ch) - gt.get(r, col, ch);
                full_sq += d * d;
            }
        }
    }
    Ok(LossReport {
        total: total / n_core as f64,
        per_pixel_count: n_core,
        selected_rmse: (sel_sq / n_core as f64).sqrt(),
        full_rmse: (full_sq / n_full as f64).sqrt(),
    })
}

/// Bias-corrected adaptive per-parameter steps.
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    pub learn_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, learn_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            learn_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.learn_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One point of the loss curve.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub selected_rmse: f64,
    pub full_rmse: f64,
}

/// `step,total,selected_rmse,full_rmse` CSV text.
pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,total,selected_rmse,full_rmse\n");
    for p in curve {
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.step, p.total, p.selected_rmse, p.full_rmse
        ));
    }
    s
}

pub struct TrainOutput {
    pub refiner: RefinerParams,
    pub fusion: FusionParams,
    pub curve: Vec<CurvePoint>,
}

/// Everything about one scene that does not change across steps.
struct ScenePrep {
    input: SparseTensor<f64>,
    plan: RefinerPlan,
    /// Row in the refined tensor for each supervised core pixel.
    core_rows: Vec<usize>,
    gt_core: Vec<f64>,
    coarse_core: Vec<f64>,
    h_core: Vec<f64>,
    n_sites: usize,
    /// Coarse-map squared error over all valid pixels / over core pixels,
    /// for incremental full-map RMSE reporting.
    coarse_full_sse: f64,
    n_valid_full: usize,
    coarse_core_sse: f64,
}

fn prepare_scene(
    scene: &SceneSample,
    backbone: &BackboneOutput,
    cfg: &TrainConfig,
    rcfg: &RefinerConfig,
) -> Result<Option<ScenePrep>> {
    let prep = prepare_inputs(
        &scene.rgb,
        backbone,
        SelectorKind::Entropy { alpha: cfg.alpha },
        cfg.halo,
    )?;
    if prep.selection.core_count() == 0 {
        return Ok(None);
    }
    let input = assemble_sparse_input(&prep.selection, &scene.rgb, &prep.coarse_hr, &prep.h_map)?;
    let plan = RefinerPlan::build(&input, rcfg)?;
    let c = scene.gt_geo.channels();
    let mut core_rows = Vec::new();
    let mut gt_core = Vec::new();
    let mut coarse_core = Vec::new();
    let mut h_core = Vec::new();
    let mut coarse_core_sse = 0.0;
    for &(r, col) in &prep.selection.core_coords() {
        let (ru, cu) = (r as usize, col as usize);
        if !scene.mask.get(ru, cu) {
            continue;
        }
        let row = input
            .row_of((r as i32, col as i32))
            .expect("selection rows exist in assembled tensor");
        core_rows.push(row);
        gt_core.extend_from_slice(scene.gt_geo.pixel(ru, cu));
        coarse_core.extend_from_slice(prep.coarse_hr.pixel(ru, cu));
        h_core.push(prep.h_map.get(ru, cu, 0));
        for ch in 0..c {
            let d = prep.coarse_hr.get(ru, cu, ch) - scene.gt_geo.get(ru, cu, ch);
            coarse_core_sse += d * d;
        }
    }
    if core_rows.is_empty() {
        return Ok(None);
    }
    let mut coarse_full_sse = 0.0;
    let mut n_valid_full = 0usize;
    for r in 0..scene.gt_geo.height() {
        for col in 0..scene.gt_geo.width() {
            if !scene.mask.get(r, col) {
                continue;
            }
            n_valid_full += 1;
            for ch in 0..c {
                let d = prep.coarse_hr.get(r, col, ch) - scene.gt_geo.get(r, col, ch);
                coarse_full_sse += d * d;
            }
        }
    }
    let n_sites = input.len();
    Ok(Some(ScenePrep {
        input,
        plan,
        core_rows,
        gt_core,
        coarse_core,
        h_core,
        n_sites,
        coarse_full_sse,
        n_valid_full,
        coarse_core_sse,
    }))
}

/// Forward + backward of one scene with the current parameters. Returns the
/// gradient (flat, refiner then fusion), the mean L1 loss, and the fused
/// squared error over core pixels.
struct SceneGrad {
    grad_flat: Vec<f64>,
    loss: f64,
    fused_core_sse: f64,
}

fn scene_forward_backward(
    prep: &ScenePrep,
    refiner_params: &RefinerParams,
    refiner_cfg: &RefinerConfig,
    fusion_params: &FusionParams,
) -> Result<SceneGrad> {
    let c = refiner_cfg.geo_channels;
    let k = refiner_cfg.conf_logits;
    let out_c = refiner_cfg.out_channels();
    let counter = MaddCounter::new();
    let trace = forward_with_trace(&prep.plan, refiner_params, prep.input.feats(), &counter)?;
    let out = trace.output();

    let n = prep.core_rows.len();
    let inv_n = 1.0 / n as f64;
    let mut upstream = vec![0.0f64; prep.n_sites * out_c];
    let mut fusion_grad = FusionParams::zeros(c, fusion_params.hidden);
    let mut loss = 0.0f64;
    let mut fused_sse = 0.0f64;
    for (i, &row) in prep.core_rows.iter().enumerate() {
        let site = &out[row * out_c..(row + 1) * out_c];
        let delta = &site[..c];
        let conf = &site[c..];
        let h_delta = entropy_of_logits(conf);
        let h_coarse = prep.h_core[i];
        let coarse = &prep.coarse_core[i * c..(i + 1) * c];
        let gt = &prep.gt_core[i * c..(i + 1) * c];
        let (value, _) = gated_fuse(coarse, delta, h_coarse, h_delta, fusion_params)?;
        let mut g_value = vec![0.0f64; c];
        for ch in 0..c {
            let d = value[ch] - gt[ch];
            loss += d.abs() * inv_n;
            fused_sse += d * d;
            g_value[ch] = d.signum() * inv_n;
        }
        let g = fusion_backward(coarse, delta, h_coarse, h_delta, fusion_params, &g_value)?;
        for (a, b) in fusion_grad.w1.iter_mut().zip(g.params.w1.iter()) {
            *a += b;
        }
        for (a, b) in fusion_grad.b1.iter_mut().zip(g.params.b1.iter()) {
            *a += b;
        }
        for (a, b) in fusion_grad.w2.iter_mut().zip(g.params.w2.iter()) {
            *a += b;
        }
        fusion_grad.b2 += g.params.b2;
        let g_conf = entropy_of_logits_backward(conf, g.d_h_delta);
        let dst = &mut upstream[row * out_c..(row + 1) * out_c];
        for ch in 0..c {
            dst[ch] = g.d_delta[ch];
        }
        for j in 0..k {
            dst[c + j] = g_conf[j];
        }
    }
    let mut refiner_grad = RefinerParams::zeros(refiner_cfg)?;
    backward_from_trace(
        &prep.plan,
        refiner_params,
        &trace,
        &upstream,
        &mut refiner_grad,
    )?;
    let mut grad_flat = refiner_grad.flatten();
    grad_flat.extend_from_slice(&fusion_grad.flatten());
    Ok(SceneGrad {
        grad_flat,
        loss,
        fused_core_sse: fused_sse,
    })
}

fn checksum_backbone(backbones: &[(SceneSample, BackboneOutput)]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |v: f64| {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    };
    for (_, b) in backbones {
        for &v in b.coarse_lr.values() {
            eat(v);
        }
        for &v in b.logits_lr.values() {
            eat(v);
        }
    }
    h
}

/// Minibatch training. Fully reproducible from `(cfg.seed, init_seed)`;
/// batch items run forward/backward in parallel and their gradients merge
/// in batch order.
pub fn train(
    scenes: &[(SceneSample, BackboneOutput)],
    cfg: &TrainConfig,
    rcfg: &RefinerConfig,
    init_seed: u64,
) -> Result<TrainOutput> {
    if scenes.is_empty() {
        return Err(Error::invalid_argument(
            "training needs at least one scene".to_string(),
        ));
    }
    if cfg.steps == 0 {
        return Err(Error::invalid_argument(
            "training needs at least one step".to_string(),
        ));
    }
    if cfg.learn_rate < 0.0 {
        return Err(Error::invalid_argument(
            "learning rate must be non-negative".to_string(),
        ));
    }
    rcfg.validate()?;
    let frozen_before = checksum_backbone(scenes);

    let mut preps = Vec::new();
    for (scene, backbone) in scenes {
        if let Some(p) = prepare_scene(scene, backbone, cfg, rcfg)? {
            preps.push(p);
        }
    }
    if preps.is_empty() {
        return Err(Error::EmptyEvaluation(
            "no scene produced a non-empty selection at this alpha".to_string(),
        ));
    }

    let mut refiner = RefinerParams::init(rcfg, init_seed)?;
    let mut fusion = FusionParams::init(rcfg.geo_channels, 16, init_seed ^ 0x5EED_F00D);
    let n_refiner = refiner.param_count();
    let mut flat = refiner.flatten();
    flat.extend_from_slice(&fusion.flatten());
    let mut adam = AdamState::new(flat.len(), cfg.learn_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch_ids: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.gen_range(0..preps.len()))
            .collect();
        let results: Vec<Result<SceneGrad>> = crate::par::map_indexed(batch_ids.len(), |i| {
            scene_forward_backward(&preps[batch_ids[i]], &refiner, rcfg, &fusion)
        });
        let mut grad = vec![0.0f64; flat.len()];
        let mut total = 0.0f64;
        let mut sel_sse = 0.0f64;
        let mut sel_n = 0usize;
        let mut full_sse = 0.0f64;
        let mut full_n = 0usize;
        for (i, r) in results.into_iter().enumerate() {
            let r = r?;
            let scale = 1.0 / cfg.batch as f64;
            for (a, b) in grad.iter_mut().zip(r.grad_flat.iter()) {
                *a += b * scale;
            }
            total += r.loss * scale;
            let p = &preps[batch_ids[i]];
            sel_sse += r.fused_core_sse;
            sel_n += p.core_rows.len();
            full_sse += p.coarse_full_sse - p.coarse_core_sse + r.fused_core_sse;
            full_n += p.n_valid_full;
        }
        if !total.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam.step(&mut flat, &grad);
        refiner.assign_flat(&flat[..n_refiner])?;
        fusion.assign_flat(&flat[n_refiner..])?;
        curve.push(CurvePoint {
            step,
            total,
            selected_rmse: (sel_sse / sel_n.max(1) as f64).sqrt(),
            full_rmse: (full_sse / full_n.max(1) as f64).sqrt(),
        });
    }

    let frozen_after = checksum_backbone(scenes);
    if frozen_before != frozen_after {
        return Err(Error::Inconsistency(
            "backbone outputs changed during training".to_string(),
        ));
    }
    Ok(TrainOutput {
        refiner,
        fusion,
        curve,
    })
}

/// Max relative gradient error of one layer type under central differences.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub layer: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{}={:e}\n", e.layer, e.max_rel_err));
        }
        s
    }
}

const FD_STEP: f64 = 1e-4;

fn rel_errs(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(fd.iter())
        .fold(0.0f64, |m, &g| m.max(g.abs()))
        .max(1e-6);
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

fn splitmix(state: &mut u64) -> f64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
}

fn check_linear_layer(seed: u64) -> f64 {
    use crate::sparse::{build_kernel_map, sparse_conv, sparse_conv_backward, ConvParams};
    let mut st = seed;
    let coords: Vec<(i32, i32)> = vec![(0, 0), (0, 1), (2, 3), (5, 5)];
    let feats: Vec<f64> = (0..coords.len() * 2).map(|_| splitmix(&mut st) - 0.5).collect();
    let x = SparseTensor::new(coords.clone(), feats, 2, 1).unwrap();
    let p = ConvParams::new(
        1,
        2,
        3,
        (0..6).map(|_| splitmix(&mut st) - 0.5).collect(),
        vec![0.1, -0.2, 0.3],
    )
    .unwrap();
    let km = build_kernel_map(&x, &coords, 1, 1).unwrap();
    let g_out: Vec<f64> = (0..coords.len() * 3).map(|_| splitmix(&mut st) - 0.5).collect();
    let (d_w, _, _) = sparse_conv_backward(&x, &p, &km, &g_out).unwrap();
    let mut fd = vec![0.0; d_w.len()];
    for i in 0..d_w.len() {
        let eval = |delta: f64| -> f64 {
            let mut pp = p.clone();
            pp.weights[i] += delta;
            let y = sparse_conv(&x, &pp, &km, &coords, &MaddCounter::new()).unwrap();
            y.feats().iter().zip(g_out.iter()).map(|(a, g)| a * g).sum()
        };
        fd[i] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
    }
    rel_errs(&d_w, &fd)
}

fn check_rectifier(seed: u64) -> f64 {
    use crate::sparse::{relu, relu_backward};
    let mut st = seed;
    // Inputs bounded away from the kink by > 10x the step.
    let pre: Vec<f64> = (0..16)
        .map(|_| {
            let v = splitmix(&mut st) * 2.0 - 1.0;
            let s = if v >= 0.0 { 1.0 } else { -1.0 };
            s * (v.abs() + 20.0 * FD_STEP)
        })
        .collect();
    let g: Vec<f64> = (0..16).map(|_| splitmix(&mut st) - 0.5).collect();
    let analytic = relu_backward(&pre, &g);
    let mut fd = vec![0.0; pre.len()];
    for i in 0..pre.len() {
        let eval = |delta: f64| -> f64 {
            let mut p = pre.clone();
            p[i] += delta;
            relu(&p).iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        fd[i] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
    }
    rel_errs(&analytic, &fd)
}

fn check_site_norm(seed: u64) -> f64 {
    use crate::sparse::{site_norm, site_norm_backward, site_norm_with_cache};
    let mut st = seed;
    let coords: Vec<(i32, i32)> = (0..6).map(|i| (i, 2 * i)).collect();
    let feats: Vec<f64> = (0..coords.len() * 2).map(|_| splitmix(&mut st) * 2.0 - 1.0).collect();
    let x = SparseTensor::new(coords.clone(), feats.clone(), 2, 1).unwrap();
    let scale = [1.3, -0.8];
    let shift = [0.2, 0.1];
    let g: Vec<f64> = (0..feats.len()).map(|_| splitmix(&mut st) - 0.5).collect();
    let (_, cache) = site_norm_with_cache(&x, &scale, &shift).unwrap();
    let (d_scale, d_shift, d_x) = site_norm_backward(&cache, &scale, &g, 2);
    let mut analytic = d_x.clone();
    analytic.extend_from_slice(&d_scale);
    analytic.extend_from_slice(&d_shift);
    let mut fd = Vec::new();
    for i in 0..feats.len() {
        let eval = |delta: f64| -> f64 {
            let mut f = feats.clone();
            f[i] += delta;
            let x = SparseTensor::new(coords.clone(), f, 2, 1).unwrap();
            let y = site_norm(&x, &scale, &shift).unwrap();
            y.feats().iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        fd.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
    }
    for i in 0..2 {
        let eval = |delta: f64| -> f64 {
            let mut s = scale;
            s[i] += delta;
            let y = site_norm(&x, &s, &shift).unwrap();
            y.feats().iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        fd.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
    }
    for i in 0..2 {
        let eval = |delta: f64| -> f64 {
            let mut s = shift;
            s[i] += delta;
            let y = site_norm(&x, &scale, &s).unwrap();
            y.feats().iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        fd.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
    }
    rel_errs(&analytic, &fd)
}

fn check_entropy(seed: u64) -> f64 {
    let mut st = seed;
    let logits: Vec<f64> = (0..4).map(|_| splitmix(&mut st) * 2.0 - 1.0).collect();
    let analytic = entropy_of_logits_backward(&logits, 1.0);
    let mut fd = vec![0.0; 4];
    for i in 0..4 {
        let eval = |delta: f64| -> f64 {
            let mut l = logits.clone();
            l[i] += delta;
            entropy_of_logits(&l)
        };
        fd[i] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
    }
    rel_errs(&analytic, &fd)
}

fn check_fusion(seed: u64) -> f64 {
    let mut st = seed;
    let params = FusionParams::init(2, 6, seed);
    let coarse: Vec<f64> = (0..2).map(|_| splitmix(&mut st) * 2.0).collect();
    let delta: Vec<f64> = (0..2).map(|_| splitmix(&mut st) - 0.5).collect();
    let (hc, hd) = (0.55, 0.25);
    let upstream: Vec<f64> = (0..2).map(|_| splitmix(&mut st) - 0.5).collect();
    let g = fusion_backward(&coarse, &delta, hc, hd, &params, &upstream).unwrap();
    let analytic = g.params.flatten();
    let flat = params.flatten();
    let mut fd = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let eval = |deltav: f64| -> f64 {
            let mut f = flat.clone();
            f[i] += deltav;
            let mut p = params.clone();
            p.assign_flat(&f).unwrap();
            let (v, _) = gated_fuse(&coarse, &delta, hc, hd, &p).unwrap();
            v.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
        };
        fd[i] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
    }
    rel_errs(&analytic, &fd)
}

/// The end-to-end selected-pixel loss on a tiny instance: L1 at core pixels
/// through fusion, confidence entropy, and the refiner.
fn check_end_to_end(seed: u64) -> Result<f64> {
    let rcfg = RefinerConfig {
        levels: 1,
        channels: vec![4],
        kernel_size: 3,
        in_channels: 5,
        geo_channels: 1,
        conf_logits: 2,
        norm: crate::refiner::NormKind::SiteNorm,
    };
    let mut st = seed;
    let mut coords = std::collections::BTreeSet::new();
    while coords.len() < 9 {
        coords.insert((
            (splitmix(&mut st) * 9.0) as i32,
            (splitmix(&mut st) * 9.0) as i32,
        ));
    }
    let coords: Vec<(i32, i32)> = coords.into_iter().collect();
    let feats: Vec<f64> = (0..coords.len() * 5).map(|_| splitmix(&mut st)).collect();
    let input = SparseTensor::new(coords.clone(), feats, 5, 1)?;
    let plan = RefinerPlan::build(&input, &rcfg)?;
    let refiner = RefinerParams::init(&rcfg, seed ^ 77)?;
    let fusion = FusionParams::init(1, 4, seed ^ 99);
    let n_refiner = refiner.param_count();
    // Core pixels: every other site. Coarse and gt values fixed.
    let core_rows: Vec<usize> = (0..coords.len()).step_by(2).collect();
    let coarse: Vec<f64> = core_rows.iter().map(|_| 2.0 + splitmix(&mut st)).collect();
    let gt: Vec<f64> = core_rows.iter().map(|_| 1.5 + splitmix(&mut st)).collect();
    let h_core: Vec<f64> = core_rows.iter().map(|_| splitmix(&mut st) * 0.8).collect();

    let loss_of = |theta: &[f64]| -> Result<f64> {
        let mut rp = RefinerParams::zeros(&rcfg)?;
        rp.assign_flat(&theta[..n_refiner])?;
        let mut fp = FusionParams::zeros(1, 4);
        fp.assign_flat(&theta[n_refiner..])?;
        let trace = forward_with_trace(&plan, &rp, input.feats(), &MaddCounter::new())?;
        let out = trace.output();
        let mut loss = 0.0;
        let inv_n = 1.0 / core_rows.len() as f64;
        for (i, &row) in core_rows.iter().enumerate() {
            let site = &out[row * 3..(row + 1) * 3];
            let h_delta = entropy_of_logits(&site[1..]);
            let (v, _) = gated_fuse(&[coarse[i]], &[site[0]], h_core[i], h_delta, &fp)?;
            loss += (v[0] - gt[i]).abs() * inv_n;
        }
        Ok(loss)
    };

    // Analytic gradient assembled exactly like the trainer does.
    let trace = forward_with_trace(&plan, &refiner, input.feats(), &MaddCounter::new())?;
    let out = trace.output();
    let mut upstream = vec![0.0f64; input.len() * 3];
    let mut fusion_grad = FusionParams::zeros(1, 4);
    let inv_n = 1.0 / core_rows.len() as f64;
    for (i, &row) in core_rows.iter().enumerate() {
        let site = &out[row * 3..(row + 1) * 3];
        let h_delta = entropy_of_logits(&site[1..]);
        let (v, _) = gated_fuse(&[coarse[i]], &[site[0]], h_core[i], h_delta, &fusion)?;
        let g_value = [(v[0] - gt[i]).signum() * inv_n];
        let g = fusion_backward(&[coarse[i]], &[site[0]], h_core[i], h_delta, &fusion, &g_value)?;
        for (a, b) in fusion_grad.w1.iter_mut().zip(g.params.w1.iter()) {
            *a += b;
        }
        for (a, b) in fusion_grad.b1.iter_mut().zip(g.params.b1.iter()) {
            *a += b;
        }
        for (a, b) in fusion_grad.w2.iter_mut().zip(g.params.w2.iter()) {
            *a += b;
        }
        fusion_grad.b2 += g.params.b2;
        let g_conf = entropy_of_logits_backward(&site[1..], g.d_h_delta);
        upstream[row * 3] = g.d_delta[0];
        upstream[row * 3 + 1] = g_conf[0];
        upstream[row * 3 + 2] = g_conf[1];
    }
    let mut refiner_grad = RefinerParams::zeros(&rcfg)?;
    backward_from_trace(&plan, &refiner, &trace, &upstream, &mut refiner_grad)?;
    let mut analytic = refiner_grad.flatten();
    analytic.extend_from_slice(&fusion_grad.flatten());

    let mut theta = refiner.flatten();
    theta.extend_from_slice(&fusion.flatten());
    let mut fd = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += FD_STEP;
        tm[i] -= FD_STEP;
        fd[i] = (loss_of(&tp)? - loss_of(&tm)?) / (2.0 * FD_STEP);
    }
    Ok(rel_errs(&analytic, &fd))
}

/// Finite-difference checks (double precision, step 1e-4) on every
/// differentiable layer type and the end-to-end selected-pixel loss on a
/// ≤10-site instance. Failures show up in the report, not as errors.
pub fn grad_check_all(seed: u64) -> Result<GradCheckReport> {
    let entries = vec![
        GradCheckEntry {
            layer: "linear_1x1".to_string(),
            max_rel_err: check_linear_layer(seed),
        },
        GradCheckEntry {
            layer: "rectifier".to_string(),
            max_rel_err: check_rectifier(seed.wrapping_add(1)),
        },
        GradCheckEntry {
            layer: "site_norm".to_string(),
            max_rel_err: check_site_norm(seed.wrapping_add(2)),
        },
        GradCheckEntry {
            layer: "entropy".to_string(),
            max_rel_err: check_entropy(seed.wrapping_add(3)),
        },
        GradCheckEntry {
            layer: "fusion_gate".to_string(),
            max_rel_err: check_fusion(seed.wrapping_add(4)),
        },
        GradCheckEntry {
            layer: "end_to_end".to_string(),
            max_rel_err: check_end_to_end(seed.wrapping_add(5))?,
        },
    ];
    Ok(GradCheckReport { entries })
}
