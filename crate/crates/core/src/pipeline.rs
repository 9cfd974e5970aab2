//! End-to-end orchestration: upsample the coarse backbone output, compute
//! entropy, select pixels, refine sparsely, fuse, and report diagnostics.
//! Also the sparse-vs-dense benchmark harness and the ablation sweeps.

use crate::dense::{compute_entropy, upsample_nearest, DenseMap};
use crate::error::Result;
use crate::fusion::{apply_fusion_to_map, FusionParams, FusionStrategy};
use crate::metrics::{depth_metrics, depth_metrics_at, MetricReport};
use crate::refiner::{run_refiner_with_plan, RefinerConfig, RefinerParams, RefinerPlan};
use crate::select::{
    assemble_sparse_input, dilate_halo, edge_score_map, random_score_map, select_entropy,
    select_top_fraction, PixelSelection, SelectPolicy,
};
use crate::sparse::MaddCounter;
use crate::synth::{BackboneOutput, SceneSample};
use std::time::Instant;

/// Pixel selection policy for a pipeline run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectorKind {
    /// Entropy threshold (the default path).
    Entropy { alpha: f64 },
    /// Top fraction by entropy (equal-budget ablation).
    TopFraction { fraction: f64 },
    /// Top fraction by seeded uniform scores.
    Random { fraction: f64, seed: u64 },
    /// Top fraction by Sobel gradient magnitude of luminance.
    Edge { fraction: f64 },
}

/// Runtime knobs of one pipeline run.
#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    pub selector: SelectorKind,
    pub halo: usize,
    pub strategy: FusionStrategy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            selector: SelectorKind::Entropy { alpha: 0.3 },
            halo: 1,
            strategy: FusionStrategy::Gated,
        }
    }
}

/// Per-stage wall time in seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimes {
    pub upsample_s: f64,
    pub entropy_s: f64,
    pub select_s: f64,
    pub assemble_s: f64,
    pub refine_s: f64,
    pub fuse_s: f64,
    pub total_s: f64,
}

/// What one pipeline run did and what it cost.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub selected_fraction: f64,
    pub halo_fraction: f64,
    pub kernel_pairs: usize,
    pub refiner_madds: u64,
    pub level_sites: Vec<usize>,
    pub times: StageTimes,
}

impl Diagnostics {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("selected_fraction={}\n", self.selected_fraction));
        s.push_str(&format!("halo_fraction={}\n", self.halo_fraction));
        s.push_str(&format!("kernel_pairs={}\n", self.kernel_pairs));
        s.push_str(&format!("refiner_madds={}\n", self.refiner_madds));
        s.push_str(&format!(
            "level_sites={}\n",
            self.level_sites
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("time_upsample_s={}\n", self.times.upsample_s));
        s.push_str(&format!("time_entropy_s={}\n", self.times.entropy_s));
        s.push_str(&format!("time_select_s={}\n", self.times.select_s));
        s.push_str(&format!("time_assemble_s={}\n", self.times.assemble_s));
        s.push_str(&format!("time_refine_s={}\n", self.times.refine_s));
        s.push_str(&format!("time_fuse_s={}\n", self.times.fuse_s));
        s.push_str(&format!("time_total_s={}\n", self.times.total_s));
        s
    }
}

/// The dense stages shared by inference and training: upsampled coarse map,
/// high-resolution entropy map, and the (halo-dilated) selection.
pub struct PreparedInputs {
    pub coarse_hr: DenseMap,
    pub h_map: DenseMap,
    pub selection: PixelSelection,
}

/// Build the selection for a given policy from the prepared maps.
pub fn make_selection(
    kind: SelectorKind,
    h_map: &DenseMap,
    rgb: &DenseMap,
) -> Result<PixelSelection> {
    match kind {
        SelectorKind::Entropy { alpha } => select_entropy(h_map, alpha),
        SelectorKind::TopFraction { fraction } => {
            select_top_fraction(h_map, fraction, SelectPolicy::TopFraction)
        }
        SelectorKind::Random { fraction, seed } => {
            let scores = random_score_map(h_map.height(), h_map.width(), seed);
            select_top_fraction(&scores, fraction, SelectPolicy::Random)
        }
        SelectorKind::Edge { fraction } => {
            let scores = edge_score_map(rgb)?;
            select_top_fraction(&scores, fraction, SelectPolicy::Edge)
        }
    }
}

/// Upsample the backbone outputs to the RGB resolution, compute entropy,
/// select, and dilate the halo.
pub fn prepare_inputs(
    rgb: &DenseMap,
    backbone: &BackboneOutput,
    selector: SelectorKind,
    halo: usize,
) -> Result<PreparedInputs> {
    backbone.validate()?;
    let (h, w) = (rgb.height(), rgb.width());
    let coarse_hr = upsample_nearest(&backbone.coarse_lr, h, w)?;
    let logits_hr = upsample_nearest(&backbone.logits_lr, h, w)?;
    let h_map = compute_entropy(&logits_hr)?;
    let selection = make_selection(selector, &h_map, rgb)?;
    let selection = dilate_halo(&selection, halo);
    Ok(PreparedInputs {
        coarse_hr,
        h_map,
        selection,
    })
}

/// Run the full two-stage pipeline. An empty selection is a valid fast path
/// that returns the upsampled coarse map unchanged.
pub fn run_pipeline(
    rgb: &DenseMap,
    backbone: &BackboneOutput,
    refiner_params: &RefinerParams,
    refiner_cfg: &RefinerConfig,
    fusion_params: &FusionParams,
    cfg: &PipelineConfig,
) -> Result<(DenseMap, Diagnostics)> {
    let total_start = Instant::now();
    let mut diag = Diagnostics::default();
    let (h, w) = (rgb.height(), rgb.width());

    let t = Instant::now();
    backbone.validate()?;
    let coarse_hr = upsample_nearest(&backbone.coarse_lr, h, w)?;
    let logits_hr = upsample_nearest(&backbone.logits_lr, h, w)?;
    diag.times.upsample_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let h_map = compute_entropy(&logits_hr)?;
    drop(logits_hr);
    diag.times.entropy_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let selection = make_selection(cfg.selector, &h_map, rgb)?;
    let selection = dilate_halo(&selection, cfg.halo);
    diag.times.select_s = t.elapsed().as_secs_f64();
    diag.selected_fraction = selection.core_fraction();
    diag.halo_fraction = selection.total_fraction() - selection.core_fraction();

    if selection.core_count() == 0 {
        diag.times.total_s = total_start.elapsed().as_secs_f64();
        return Ok((coarse_hr, diag));
    }

    let t = Instant::now();
    let input = assemble_sparse_input(&selection, rgb, &coarse_hr, &h_map)?;
    diag.times.assemble_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let counter = MaddCounter::new();
    let plan = RefinerPlan::build(&input, refiner_cfg)?;
    let refined = run_refiner_with_plan(&plan, &input, refiner_params, &counter)?;
    diag.times.refine_s = t.elapsed().as_secs_f64();
    diag.refiner_madds = counter.get();
    diag.kernel_pairs = plan.total_pairs();
    diag.level_sites = plan.level_sizes();
    drop(input);

    let t = Instant::now();
    let out = apply_fusion_to_map(
        &coarse_hr,
        &selection,
        &refined,
        &h_map,
        fusion_params,
        cfg.strategy,
    )?;
    diag.times.fuse_s = t.elapsed().as_secs_f64();
    diag.times.total_s = total_start.elapsed().as_secs_f64();
    Ok((out, diag))
}

/// One benchmark table row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub label: String,
    pub median_total_s: f64,
    pub median_refine_s: f64,
    pub refiner_madds: u64,
    pub selected_fraction: f64,
    pub halo_fraction: f64,
    pub metrics: MetricReport,
}

/// Benchmark configuration; `alphas` follows the threshold-sweep grid.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
    pub alphas: Vec<f64>,
    pub halo: usize,
    pub strategy: FusionStrategy,
    pub include_dense_baseline: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 5,
            iters: 20,
            alphas: vec![0.8, 0.6, 0.3, 0.1],
            halo: 1,
            strategy: FusionStrategy::Gated,
            include_dense_baseline: true,
        }
    }
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn bench_one(
    label: &str,
    scene: &SceneSample,
    backbone: &BackboneOutput,
    refiner_params: &RefinerParams,
    refiner_cfg: &RefinerConfig,
    fusion_params: &FusionParams,
    cfg: &PipelineConfig,
    warmup: usize,
    iters: usize,
) -> Result<BenchRow> {
    let mut last: Option<(DenseMap, Diagnostics)> = None;
    for _ in 0..warmup {
        last = Some(run_pipeline(
            &scene.rgb,
            backbone,
            refiner_params,
            refiner_cfg,
            fusion_params,
            cfg,
        )?);
    }
    let mut totals = Vec::with_capacity(iters);
    let mut refines = Vec::with_capacity(iters);
    for _ in 0..iters {
        let (out, diag) = run_pipeline(
            &scene.rgb,
            backbone,
            refiner_params,
            refiner_cfg,
            fusion_params,
            cfg,
        )?;
        totals.push(diag.times.total_s);
        refines.push(diag.times.refine_s);
        last = Some((out, diag));
    }
    let (out, diag) = last.expect("at least one iteration");
    let metrics = depth_metrics(&out, &scene.gt_geo, &scene.mask)?;
    Ok(BenchRow {
        label: label.to_string(),
        median_total_s: median(&mut totals),
        median_refine_s: median(&mut refines),
        refiner_madds: diag.refiner_madds,
        selected_fraction: diag.selected_fraction,
        halo_fraction: diag.halo_fraction,
        metrics,
    })
}

/// Run the benchmark grid on one scene: the sparse pipeline at each alpha in
/// `cfg.alphas`, plus an all-pixel dense baseline with the same weights.
pub fn bench(
    scene: &SceneSample,
    backbone: &BackboneOutput,
    refiner_params: &RefinerParams,
    refiner_cfg: &RefinerConfig,
    fusion_params: &FusionParams,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &alpha in &cfg.alphas {
        let pc = PipelineConfig {
            selector: SelectorKind::Entropy { alpha },
            halo: cfg.halo,
            strategy: cfg.strategy,
        };
        rows.push(bench_one(
            &format!("sparse alpha={alpha}"),
            scene,
            backbone,
            refiner_params,
            refiner_cfg,
            fusion_params,
            &pc,
            cfg.warmup,
            cfg.iters,
        )?);
    }
    if cfg.include_dense_baseline {
        let pc = PipelineConfig {
            selector: SelectorKind::TopFraction { fraction: 1.0 },
            halo: 0,
            strategy: cfg.strategy,
        };
        rows.push(bench_one(
            "dense baseline",
            scene,
            backbone,
            refiner_params,
            refiner_cfg,
            fusion_params,
            &pc,
            cfg.warmup,
            cfg.iters,
        )?);
    }
    Ok(rows)
}

/// Format bench rows as an aligned text table.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<22} {:>12} {:>12} {:>14} {:>10} {:>10} {:>10} {:>10}\n",
        "setting", "total_s", "refine_s", "madds", "core_frac", "halo_frac", "abs_rel", "rmse"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<22} {:>12.6} {:>12.6} {:>14} {:>10.4} {:>10.4} {:>10.6} {:>10.6}\n",
            r.label,
            r.median_total_s,
            r.median_refine_s,
            r.refiner_madds,
            r.selected_fraction,
            r.halo_fraction,
            r.metrics.abs_rel.unwrap_or(f64::NAN),
            r.metrics.rmse.unwrap_or(f64::NAN),
        ));
    }
    s
}

/// Per-scene evaluation of one pipeline configuration.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub full_rmse: f64,
    pub full_abs_rel: f64,
    pub selected_rmse: f64,
    pub coarse_selected_rmse: f64,
    pub coarse_full_rmse: f64,
    pub selected_fraction: f64,
    pub refine_s: f64,
    pub refiner_madds: u64,
}

/// Run a configuration over held-out scenes, reporting full-map and
/// selected-pixel RMSE against the coarse map.
pub fn evaluate_config(
    scenes: &[(SceneSample, BackboneOutput)],
    refiner_params: &RefinerParams,
    refiner_cfg: &RefinerConfig,
    fusion_params: &FusionParams,
    cfg: &PipelineConfig,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (scene, backbone) in scenes {
        let (out, diag) = run_pipeline(
            &scene.rgb,
            backbone,
            refiner_params,
            refiner_cfg,
            fusion_params,
            cfg,
        )?;
        let coarse_hr = upsample_nearest(
            &backbone.coarse_lr,
            scene.rgb.height(),
            scene.rgb.width(),
        )?;
        let full = depth_metrics(&out, &scene.gt_geo, &scene.mask)?;
        let coarse_full = depth_metrics(&coarse_hr, &scene.gt_geo, &scene.mask)?;
        // Selected-pixel metrics are computed over this run's core set; an
        // empty selection leaves the coarse map untouched.
        let prep = prepare_inputs(&scene.rgb, backbone, cfg.selector, 0)?;
        let core = prep.selection.core_coords();
        let (selected_rmse, coarse_selected_rmse) = if core.is_empty() {
            (0.0, 0.0)
        } else {
            let sel_m = depth_metrics_at(&out, &scene.gt_geo, &scene.mask, &core)?;
            let sel_c = depth_metrics_at(&coarse_hr, &scene.gt_geo, &scene.mask, &core)?;
            (sel_m.rmse.unwrap_or(0.0), sel_c.rmse.unwrap_or(0.0))
        };
        rows.push(EvalRow {
            full_rmse: full.rmse.unwrap_or(f64::NAN),
            full_abs_rel: full.abs_rel.unwrap_or(f64::NAN),
            selected_rmse,
            coarse_selected_rmse,
            coarse_full_rmse: coarse_full.rmse.unwrap_or(f64::NAN),
            selected_fraction: diag.selected_fraction,
            refine_s: diag.times.refine_s,
            refiner_madds: diag.refiner_madds,
        })
    }
    Ok(rows)
}

/// Ablation sweep results over a held-out set.
#[derive(Debug, Clone)]
pub struct AblationReport {
    /// (label, per-scene rows) for each selector at equal pixel budget.
    pub selector_rows: Vec<(String, Vec<EvalRow>)>,
    /// (label, per-scene rows) for each fusion strategy at the default alpha.
    pub fusion_rows: Vec<(String, Vec<EvalRow>)>,
    /// (alpha, per-scene rows) for the threshold sweep.
    pub threshold_rows: Vec<(f64, Vec<EvalRow>)>,
}

pub fn mean_of(rows: &[EvalRow], f: impl Fn(&EvalRow) -> f64) -> f64 {
    rows.iter().map(&f).sum::<f64>() / rows.len().max(1) as f64
}

/// Selector / fusion / threshold sweeps with shared weights.
pub fn ablate(
    scenes: &[(SceneSample, BackboneOutput)],
    refiner_params: &RefinerParams,
    refiner_cfg: &RefinerConfig,
    fusion_params: &FusionParams,
    budget: f64,
    alphas: &[f64],
    halo: usize,
    selector_seed: u64,
) -> Result<AblationReport> {
    let mut selector_rows = Vec::new();
    let selectors: Vec<(String, SelectorKind)> = vec![
        ("entropy-top".to_string(), SelectorKind::TopFraction { fraction: budget }),
        (
            "random".to_string(),
            SelectorKind::Random {
                fraction: budget,
                seed: selector_seed,
            },
        ),
        ("edge".to_string(), SelectorKind::Edge { fraction: budget }),
    ];
    for (label, sel) in selectors {
        let cfg = PipelineConfig {
            selector: sel,
            halo,
            strategy: FusionStrategy::Gated,
        };
        selector_rows.push((
            label,
            evaluate_config(scenes, refiner_params, refiner_cfg, fusion_params, &cfg)?,
        ));
    }

    let mut fusion_rows = Vec::new();
    for (label, strategy) in [
        ("gated", FusionStrategy::Gated),
        ("direct", FusionStrategy::Direct),
        ("entropy", FusionStrategy::Entropy),
    ] {
        let cfg = PipelineConfig {
            selector: SelectorKind::Entropy { alpha: 0.3 },
            halo,
            strategy,
        };
        fusion_rows.push((
            label.to_string(),
            evaluate_config(scenes, refiner_params, refiner_cfg, fusion_params, &cfg)?,
        ));
    }

    let mut threshold_rows = Vec::new();
    for &alpha in alphas {
        let cfg = PipelineConfig {
            selector: SelectorKind::Entropy { alpha },
            halo,
            strategy: FusionStrategy::Gated,
        };
        threshold_rows.push((
            alpha,
            evaluate_config(scenes, refiner_params, refiner_cfg, fusion_params, &cfg)?,
        ));
    }

    Ok(AblationReport {
        selector_rows,
        fusion_rows,
        threshold_rows,
    })
}

/// Format an ablation report as text tables.
pub fn ablation_table(report: &AblationReport) -> String {
    let mut s = String::new();
    s.push_str("== selector (equal budget) ==\n");
    s.push_str(&format!(
        "{:<14} {:>12} {:>14}\n",
        "selector", "full_rmse", "selected_rmse"
    ));
    for (label, rows) in &report.selector_rows {
        s.push_str(&format!(
            "{:<14} {:>12.6} {:>14.6}\n",
            label,
            mean_of(rows, |r| r.full_rmse),
            mean_of(rows, |r| r.selected_rmse),
        ));
    }
    s.push_str("\n== fusion strategy ==\n");
    s.push_str(&format!("{:<14} {:>12}\n", "strategy", "full_rmse"));
    for (label, rows) in &report.fusion_rows {
        s.push_str(&format!(
            "{:<14} {:>12.6}\n",
            label,
            mean_of(rows, |r| r.full_rmse)
        ));
    }
    s.push_str("\n== entropy threshold ==\n");
    s.push_str(&format!(
        "{:<8} {:>12} {:>12} {:>12}\n",
        "alpha", "full_rmse", "refine_s", "core_frac"
    ));
    for (alpha, rows) in &report.threshold_rows {
        s.push_str(&format!(
            "{:<8} {:>12.6} {:>12.6} {:>12.4}\n",
            alpha,
            mean_of(rows, |r| r.full_rmse),
            mean_of(rows, |r| r.refine_s),
            mean_of(rows, |r| r.selected_fraction),
        ));
    }
    s
}
