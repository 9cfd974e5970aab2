//! Command-line pipeline: synthesize scenes, run the synthetic backbone,
//! train the refiner, refine with trained weights, evaluate, benchmark, and
//! run ablation sweeps.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use georefine::dense::MapKind;
use georefine::fusion::{FusionParams, FusionStrategy};
use georefine::io::{
    dense_to_tensor, export_outputs, load_weights, mask_to_tensor, save_weights,
    selection_to_tensor, tensor_to_dense, tensor_to_mask, TensorFile,
};
use georefine::metrics::{depth_metrics, pointmap_metrics_grid, pointmap_to_points};
use georefine::pipeline::{
    ablate, ablation_table, bench, bench_table, run_pipeline, BenchConfig, PipelineConfig,
    SelectorKind,
};
use georefine::refiner::{RefinerConfig, RefinerParams};
use georefine::synth::{synth_scene, synthetic_backbone, BackboneOutput, SceneSample};
use georefine::train::{curve_to_csv, train, TrainConfig};
use georefine::ValidityMask;

#[derive(Parser)]
#[command(
    name = "georefine",
    about = "Entropy-guided sparse refinement of depth and pointmap predictions",
    version
)]
struct Cli {
    /// Pin the worker thread count (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SizeArgs {
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
    /// Benchmark-scale 2048x1536 frames.
    #[arg(long = "2k", default_value_t = false)]
    two_k: bool,
}

impl SizeArgs {
    fn dims(&self) -> (usize, usize) {
        if self.two_k {
            (2048, 1536)
        } else {
            (self.height, self.width)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes (RGB + ground-truth depth + mask).
    Synth {
        #[command(flatten)]
        size: SizeArgs,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Objects per scene; 0 picks a density matching the resolution.
        #[arg(long, default_value_t = 0)]
        n_objects: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the synthetic backbone on a scene, or validate external tensor
    /// files against the format invariants.
    Backbone {
        /// Scene directory produced by `synth`.
        #[arg(long, required_unless_present = "validate")]
        scene: Option<PathBuf>,
        #[arg(long, required_unless_present = "validate")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        long_side: usize,
        #[arg(long, default_value_t = 4)]
        k_bins: usize,
        #[arg(long, default_value_t = 0.01)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validate tensor files (coarse geometry, then logits) and exit.
        #[arg(long, num_args = 2, value_names = ["COARSE", "LOGITS"])]
        validate: Option<Vec<PathBuf>>,
    },
    /// Train refiner + fusion gate on synthetic scenes.
    Train {
        /// Scene directories from `synth`; defaults to self-synthesized
        /// training data when absent.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        synth_count: usize,
        #[arg(long, default_value_t = 192)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        n_objects: usize,
        /// Backbone input long side; 0 = half the scene long side.
        #[arg(long, default_value_t = 0)]
        long_side: usize,
        #[arg(long, default_value_t = 4)]
        k_bins: usize,
        #[arg(long, default_value_t = 0.01)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        halo: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        init_seed: u64,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        /// Comma-separated per-level widths.
        #[arg(long, default_value = "16,32")]
        channels: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a coarse prediction: file-based interface (two tensor files
    /// from any backbone plus the RGB frame).
    Refine {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        logits: PathBuf,
        /// Weight manifest from `train`; untrained seeded weights otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        halo: usize,
        #[arg(long, default_value = "gated")]
        strategy: String,
        #[arg(long, default_value = "entropy")]
        selector: String,
        /// Pixel budget for the topk/random/edge selectors.
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Geometry kind override (depth|pointmap); inferred from the
        /// coarse channel count otherwise.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Evaluate as pointmaps (accuracy/completeness/overall).
        #[arg(long, default_value_t = false)]
        pointmap: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sparse-vs-dense benchmark over the entropy threshold grid.
    Bench {
        #[command(flatten)]
        size: SizeArgs,
        #[arg(long, default_value_t = 0)]
        n_objects: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        long_side: usize,
        #[arg(long, default_value_t = 4)]
        k_bins: usize,
        #[arg(long, default_value_t = 0.01)]
        noise_sigma: f64,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        halo: usize,
        /// Skip the all-pixel dense baseline row.
        #[arg(long, default_value_t = false)]
        no_dense: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Selector / fusion / threshold ablation sweeps on held-out scenes.
    Ablate {
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 192)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        n_objects: usize,
        #[arg(long, default_value_t = 0)]
        long_side: usize,
        #[arg(long, default_value_t = 4)]
        k_bins: usize,
        #[arg(long, default_value_t = 0.01)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 9000)]
        seed: u64,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        budget: f64,
        #[arg(long, default_value_t = 1)]
        halo: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads(cli.threads)?;
    match cli.command {
        Command::Synth {
            size,
            count,
            seed,
            n_objects,
            out,
        } => cmd_synth(size, count, seed, n_objects, &out),
        Command::Backbone {
            scene,
            out,
            long_side,
            k_bins,
            noise_sigma,
            seed,
            validate,
        } => {
            if let Some(files) = validate {
                return cmd_validate(&files[0], &files[1]);
            }
            cmd_backbone(
                scene.as_deref().expect("clap enforces --scene"),
                out.as_deref().expect("clap enforces --out"),
                long_side,
                k_bins,
                noise_sigma,
                seed,
            )
        }
        Command::Train {
            scenes,
            synth_count,
            size,
            n_objects,
            long_side,
            k_bins,
            noise_sigma,
            steps,
            batch,
            lr,
            alpha,
            halo,
            seed,
            init_seed,
            levels,
            channels,
            out,
        } => cmd_train(TrainCmd {
            scenes,
            synth_count,
            size,
            n_objects,
            long_side,
            k_bins,
            noise_sigma,
            steps,
            batch,
            lr,
            alpha,
            halo,
            seed,
            init_seed,
            levels,
            channels,
            out,
        }),
        Command::Refine {
            rgb,
            coarse,
            logits,
            weights,
            alpha,
            halo,
            strategy,
            selector,
            fraction,
            seed,
            kind,
            out,
        } => cmd_refine(RefineCmd {
            rgb,
            coarse,
            logits,
            weights,
            alpha,
            halo,
            strategy,
            selector,
            fraction,
            seed,
            kind,
            out,
        }),
        Command::Eval {
            pred,
            gt,
            mask,
            pointmap,
            out,
        } => cmd_eval(&pred, &gt, mask.as_deref(), pointmap, out.as_deref()),
        Command::Bench {
            size,
            n_objects,
            seed,
            long_side,
            k_bins,
            noise_sigma,
            weights,
            warmup,
            iters,
            halo,
            no_dense,
            out,
        } => cmd_bench(BenchCmd {
            size,
            n_objects,
            seed,
            long_side,
            k_bins,
            noise_sigma,
            weights,
            warmup,
            iters,
            halo,
            no_dense,
            out,
        }),
        Command::Ablate {
            scenes,
            size,
            n_objects,
            long_side,
            k_bins,
            noise_sigma,
            seed,
            weights,
            budget,
            halo,
            out,
        } => cmd_ablate(AblateCmd {
            scenes,
            size,
            n_objects,
            long_side,
            k_bins,
            noise_sigma,
            seed,
            weights,
            budget,
            halo,
            out,
        }),
    }
}

#[cfg(feature = "parallel")]
fn init_threads(threads: usize) -> Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("failed to pin the thread pool")?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_threads(threads: usize) -> Result<()> {
    if threads > 1 {
        eprintln!("built without the `parallel` feature; running single-threaded");
    }
    Ok(())
}

/// Objects per scene when not specified: keeps the boundary-pixel fraction
/// in a useful band across resolutions.
fn auto_objects(h: usize, w: usize) -> usize {
    (((h * w) as f64).sqrt() / 16.0).round().max(4.0) as usize
}

fn scene_dir(base: &Path, index: usize) -> PathBuf {
    base.join(format!("scene_{index:04}"))
}

fn save_scene(dir: &Path, scene: &SceneSample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    dense_to_tensor(&scene.rgb).save(&dir.join("rgb.rtft"))?;
    dense_to_tensor(&scene.gt_geo).save(&dir.join("gt_depth.rtft"))?;
    mask_to_tensor(&scene.mask).save(&dir.join("mask.rtft"))?;
    std::fs::write(dir.join("meta.txt"), format!("seed={}\n", scene.seed))?;
    Ok(())
}

fn load_scene(dir: &Path) -> Result<SceneSample> {
    let rgb = tensor_to_dense(&TensorFile::load(&dir.join("rgb.rtft"))?, MapKind::Rgb)?;
    let gt_geo = tensor_to_dense(
        &TensorFile::load(&dir.join("gt_depth.rtft"))?,
        MapKind::Depth,
    )?;
    let mask = tensor_to_mask(&TensorFile::load(&dir.join("mask.rtft"))?)?;
    let seed = std::fs::read_to_string(dir.join("meta.txt"))
        .ok()
        .and_then(|s| {
            s.lines()
                .find_map(|l| l.strip_prefix("seed=").and_then(|v| v.parse().ok()))
        })
        .unwrap_or(0);
    Ok(SceneSample {
        rgb,
        gt_geo,
        mask,
        seed,
    })
}

fn cmd_synth(size: SizeArgs, count: usize, seed: u64, n_objects: usize, out: &Path) -> Result<()> {
    let (h, w) = size.dims();
    let n_obj = if n_objects == 0 {
        auto_objects(h, w)
    } else {
        n_objects
    };
    for i in 0..count {
        let scene = synth_scene(seed + i as u64, h, w, n_obj)?;
        let dir = scene_dir(out, i);
        save_scene(&dir, &scene)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_backbone(
    scene_dir: &Path,
    out: &Path,
    long_side: usize,
    k_bins: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<()> {
    let scene = load_scene(scene_dir)?;
    let long_side = long_side.min(scene.rgb.height().max(scene.rgb.width()));
    let backbone = synthetic_backbone(&scene, long_side, k_bins, noise_sigma, seed)?;
    std::fs::create_dir_all(out)?;
    dense_to_tensor(&backbone.coarse_lr).save(&out.join("coarse_lr.rtft"))?;
    dense_to_tensor(&backbone.logits_lr).save(&out.join("logits_lr.rtft"))?;
    std::fs::write(
        out.join("backbone.txt"),
        format!(
            "long_side={long_side}\nk_bins={k_bins}\nnoise_sigma={noise_sigma}\nseed={seed}\n"
        ),
    )?;
    println!(
        "wrote {} ({}x{} coarse, {} logit bins)",
        out.display(),
        backbone.coarse_lr.height(),
        backbone.coarse_lr.width(),
        backbone.logits_lr.channels()
    );
    Ok(())
}

fn cmd_validate(coarse: &Path, logits: &Path) -> Result<()> {
    let ct = TensorFile::load(coarse).with_context(|| format!("reading {}", coarse.display()))?;
    let lt = TensorFile::load(logits).with_context(|| format!("reading {}", logits.display()))?;
    let channels = *ct.dims.get(2).unwrap_or(&1);
    let kind = if channels == 3 {
        MapKind::Pointmap
    } else {
        MapKind::Depth
    };
    let coarse_map = tensor_to_dense(&ct, kind)?;
    let logits_map = tensor_to_dense(&lt, MapKind::Logits)?;
    let backbone = BackboneOutput {
        coarse_lr: coarse_map,
        logits_lr: logits_map,
        long_side_used: 0,
    };
    backbone.validate()?;
    println!(
        "ok: coarse {}x{}x{}, logits {}x{}x{}",
        backbone.coarse_lr.height(),
        backbone.coarse_lr.width(),
        backbone.coarse_lr.channels(),
        backbone.logits_lr.height(),
        backbone.logits_lr.width(),
        backbone.logits_lr.channels()
    );
    Ok(())
}

struct TrainCmd {
    scenes: Option<PathBuf>,
    synth_count: usize,
    size: usize,
    n_objects: usize,
    long_side: usize,
    k_bins: usize,
    noise_sigma: f64,
    steps: usize,
    batch: usize,
    lr: f64,
    alpha: f64,
    halo: usize,
    seed: u64,
    init_seed: u64,
    levels: usize,
    channels: String,
    out: PathBuf,
}

fn cmd_train(cmd: TrainCmd) -> Result<()> {
    let channels: Vec<usize> = cmd
        .channels
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .context("bad --channels list")?;
    if channels.len() != cmd.levels {
        bail!(
            "--channels lists {} widths but --levels is {}",
            channels.len(),
            cmd.levels
        );
    }

    let mut data: Vec<(SceneSample, BackboneOutput)> = Vec::new();
    if let Some(dir) = &cmd.scenes {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for (i, d) in dirs.iter().enumerate() {
            let scene = load_scene(d).with_context(|| format!("loading {}", d.display()))?;
            let long = effective_long_side(cmd.long_side, &scene);
            let backbone = synthetic_backbone(
                &scene,
                long,
                cmd.k_bins,
                cmd.noise_sigma,
                cmd.seed + i as u64,
            )?;
            data.push((scene, backbone));
        }
    } else {
        for i in 0..cmd.synth_count {
            let scene = synth_scene(cmd.seed + i as u64, cmd.size, cmd.size, cmd.n_objects)?;
            let long = effective_long_side(cmd.long_side, &scene);
            let backbone = synthetic_backbone(
                &scene,
                long,
                cmd.k_bins,
                cmd.noise_sigma,
                cmd.seed ^ 0xB0B0 ^ i as u64,
            )?;
            data.push((scene, backbone));
        }
    }
    if data.is_empty() {
        bail!("no training scenes found");
    }

    let geo_channels = data[0].0.gt_geo.channels();
    let rcfg = RefinerConfig {
        levels: cmd.levels,
        channels,
        kernel_size: 3,
        in_channels: geo_channels + 4,
        geo_channels,
        conf_logits: 4,
        norm: georefine::refiner::NormKind::SiteNorm,
    };
    let tcfg = TrainConfig {
        steps: cmd.steps,
        batch: cmd.batch,
        learn_rate: cmd.lr,
        seed: cmd.seed,
        loss: georefine::train::LossKind::L1,
        alpha: cmd.alpha,
        halo: cmd.halo,
    };
    let started = std::time::Instant::now();
    let out = train(&data, &tcfg, &rcfg, cmd.init_seed)?;
    std::fs::create_dir_all(&cmd.out)?;
    let weights = cmd.out.join("weights.rtwm");
    save_weights(&weights, &rcfg, &out.refiner, &out.fusion)?;
    std::fs::write(cmd.out.join("loss_curve.csv"), curve_to_csv(&out.curve))?;
    let last = out.curve.last().expect("at least one step");
    println!(
        "trained {} steps in {:.1}s; final loss {:.6}, selected rmse {:.6}, full rmse {:.6}",
        cmd.steps,
        started.elapsed().as_secs_f64(),
        last.total,
        last.selected_rmse,
        last.full_rmse
    );
    println!("wrote {}", weights.display());
    Ok(())
}

fn effective_long_side(requested: usize, scene: &SceneSample) -> usize {
    let long = scene.rgb.height().max(scene.rgb.width());
    if requested == 0 {
        (long / 2).max(1)
    } else {
        requested.min(long)
    }
}

fn parse_selector(selector: &str, alpha: f64, fraction: f64, seed: u64) -> Result<SelectorKind> {
    Ok(match selector {
        "entropy" => SelectorKind::Entropy { alpha },
        "topk" => SelectorKind::TopFraction { fraction },
        "random" => SelectorKind::Random { fraction, seed },
        "edge" => SelectorKind::Edge { fraction },
        other => bail!("unknown selector `{other}` (entropy|topk|random|edge)"),
    })
}

fn load_or_init_weights(
    weights: Option<&Path>,
    geo_channels: usize,
) -> Result<(RefinerConfig, RefinerParams, FusionParams)> {
    match weights {
        Some(path) => {
            let (cfg, r, f) = load_weights(path)?;
            if cfg.geo_channels != geo_channels {
                bail!(
                    "weights were trained for {} geometry channel(s), input has {}",
                    cfg.geo_channels,
                    geo_channels
                );
            }
            Ok((cfg, r, f))
        }
        None => {
            let cfg = RefinerConfig::with_defaults(geo_channels);
            let r = RefinerParams::init(&cfg, 1)?;
            let f = FusionParams::init(geo_channels, 16, 1);
            Ok((cfg, r, f))
        }
    }
}

struct RefineCmd {
    rgb: PathBuf,
    coarse: PathBuf,
    logits: PathBuf,
    weights: Option<PathBuf>,
    alpha: f64,
    halo: usize,
    strategy: String,
    selector: String,
    fraction: f64,
    seed: u64,
    kind: Option<String>,
    out: PathBuf,
}

fn cmd_refine(cmd: RefineCmd) -> Result<()> {
    let rgb = tensor_to_dense(&TensorFile::load(&cmd.rgb)?, MapKind::Rgb)?;
    let coarse_t = TensorFile::load(&cmd.coarse)?;
    let geo_channels = coarse_t.dims.get(2).copied().unwrap_or(1);
    let geo_kind = match cmd.kind.as_deref() {
        Some("depth") => MapKind::Depth,
        Some("pointmap") => MapKind::Pointmap,
        Some(other) => bail!("unknown kind `{other}`"),
        None => {
            if geo_channels == 3 {
                MapKind::Pointmap
            } else {
                MapKind::Depth
            }
        }
    };
    let coarse_lr = tensor_to_dense(&coarse_t, geo_kind)?;
    let logits_lr = tensor_to_dense(&TensorFile::load(&cmd.logits)?, MapKind::Logits)?;
    let backbone = BackboneOutput {
        coarse_lr,
        logits_lr,
        long_side_used: 0,
    };
    let (rcfg, rparams, fparams) = load_or_init_weights(cmd.weights.as_deref(), geo_channels)?;
    let cfg = PipelineConfig {
        selector: parse_selector(&cmd.selector, cmd.alpha, cmd.fraction, cmd.seed)?,
        halo: cmd.halo,
        strategy: cmd.strategy.parse::<FusionStrategy>()?,
    };
    let (refined, diag) = run_pipeline(&rgb, &backbone, &rparams, &rcfg, &fparams, &cfg)?;
    std::fs::create_dir_all(&cmd.out)?;
    let mask = ValidityMask::all_valid(refined.height(), refined.width());
    export_outputs(&refined, &mask, &cmd.out, "refined")?;
    // The selection that drove refinement, as an N x 3 integer tensor.
    let prep = georefine::pipeline::prepare_inputs(&rgb, &backbone, cfg.selector, cfg.halo)?;
    selection_to_tensor(&prep.selection).save(&cmd.out.join("selection.rtft"))?;
    std::fs::write(cmd.out.join("diagnostics.txt"), diag.to_text())?;
    println!(
        "refined {}x{}: selected {:.2}% (+{:.2}% halo), {} refiner madds, {:.3}s",
        refined.height(),
        refined.width(),
        100.0 * diag.selected_fraction,
        100.0 * diag.halo_fraction,
        diag.refiner_madds,
        diag.times.total_s
    );
    println!("wrote {}", cmd.out.join("refined.rtft").display());
    Ok(())
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    mask: Option<&Path>,
    pointmap: bool,
    out: Option<&Path>,
) -> Result<()> {
    let kind = if pointmap {
        MapKind::Pointmap
    } else {
        MapKind::Depth
    };
    let pred = tensor_to_dense(&TensorFile::load(pred)?, kind)?;
    let gt = tensor_to_dense(&TensorFile::load(gt)?, kind)?;
    let mask = match mask {
        Some(p) => tensor_to_mask(&TensorFile::load(p)?)?,
        None => ValidityMask::all_valid(gt.height(), gt.width()),
    };
    let report = if pointmap {
        let pred_pts = pointmap_to_points(&pred, &mask)?;
        let gt_pts = pointmap_to_points(&gt, &mask)?;
        pointmap_metrics_grid(&pred_pts, &gt_pts)?
    } else {
        depth_metrics(&pred, &gt, &mask)?
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

struct BenchCmd {
    size: SizeArgs,
    n_objects: usize,
    seed: u64,
    long_side: usize,
    k_bins: usize,
    noise_sigma: f64,
    weights: Option<PathBuf>,
    warmup: usize,
    iters: usize,
    halo: usize,
    no_dense: bool,
    out: Option<PathBuf>,
}

fn cmd_bench(cmd: BenchCmd) -> Result<()> {
    let (h, w) = cmd.size.dims();
    let n_obj = if cmd.n_objects == 0 {
        auto_objects(h, w)
    } else {
        cmd.n_objects
    };
    eprintln!("synthesizing {h}x{w} scene with {n_obj} objects...");
    let scene = synth_scene(cmd.seed, h, w, n_obj)?;
    let backbone = synthetic_backbone(
        &scene,
        cmd.long_side.min(h.max(w)),
        cmd.k_bins,
        cmd.noise_sigma,
        cmd.seed ^ 0xBEEF,
    )?;
    let (rcfg, rparams, fparams) = load_or_init_weights(cmd.weights.as_deref(), 1)?;
    let cfg = BenchConfig {
        warmup: cmd.warmup,
        iters: cmd.iters,
        halo: cmd.halo,
        include_dense_baseline: !cmd.no_dense,
        ..Default::default()
    };
    let rows = bench(&scene, &backbone, &rparams, &rcfg, &fparams, &cfg)?;
    let table = bench_table(&rows);
    print!("{table}");
    if let Some(path) = &cmd.out {
        std::fs::write(path, &table)?;
    }
    Ok(())
}

struct AblateCmd {
    scenes: usize,
    size: usize,
    n_objects: usize,
    long_side: usize,
    k_bins: usize,
    noise_sigma: f64,
    seed: u64,
    weights: Option<PathBuf>,
    budget: f64,
    halo: usize,
    out: Option<PathBuf>,
}

fn cmd_ablate(cmd: AblateCmd) -> Result<()> {
    let mut data = Vec::new();
    for i in 0..cmd.scenes {
        let scene = synth_scene(cmd.seed + i as u64, cmd.size, cmd.size, cmd.n_objects)?;
        let long = effective_long_side(cmd.long_side, &scene);
        let backbone = synthetic_backbone(
            &scene,
            long,
            cmd.k_bins,
            cmd.noise_sigma,
            cmd.seed ^ 0xFADE ^ i as u64,
        )?;
        data.push((scene, backbone));
    }
    let (rcfg, rparams, fparams) = load_or_init_weights(cmd.weights.as_deref(), 1)?;
    let report = ablate(
        &data,
        &rparams,
        &rcfg,
        &fparams,
        cmd.budget,
        &[0.8, 0.6, 0.3, 0.1],
        cmd.halo,
        cmd.seed ^ 0xD1CE,
    )?;
    let table = ablation_table(&report);
    print!("{table}");
    if let Some(path) = &cmd.out {
        std::fs::write(path, &table)?;
    }
    Ok(())
}
