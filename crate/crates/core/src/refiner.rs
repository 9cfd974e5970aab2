//! The sparse U-shaped refiner: strided encoder, bottleneck, and a
//! coordinate-cached decoder with skip concatenation, ending in a 1×1 head
//! that emits per-site residual corrections plus confidence logits.
//!
//! Decoder level ℓ writes exactly the coordinate set that entered encoder
//! level ℓ (coordinate caching), so the network's output sites equal its
//! input sites with no generative coordinate expansion. [`refiner_backward`]
//! is an exact reverse-mode pass through the whole composition.

use crate::error::{Error, Result};
use crate::sparse::{
    conv_feats, conv_feats_backward, downsample_coords_raw, norm_feats, relu, relu_backward,
    site_norm_backward, ConvParams, Coord, CoordMap, KernelMap, MaddCounter, NormCache,
    SparseTensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Normalization applied after every convolution except the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    None,
    SiteNorm,
}

/// Shape of the U: depth, per-level widths, kernel size, channel contract.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    /// Width of the assembled per-site input features.
    pub in_channels: usize,
    /// Geometry channels of the residual output (1 = depth, 3 = pointmap).
    pub geo_channels: usize,
    /// Confidence logit channels appended after the residual.
    pub conf_logits: usize,
    pub norm: NormKind,
}

impl RefinerConfig {
    /// Desk-scale default: L=2, channels (16, 32), k=3, 4 confidence logits.
    pub fn with_defaults(geo_channels: usize) -> Self {
        RefinerConfig {
            levels: 2,
            channels: vec![16, 32],
            kernel_size: 3,
            in_channels: geo_channels + 4,
            geo_channels,
            conf_logits: 4,
            norm: NormKind::SiteNorm,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.geo_channels + self.conf_logits
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::invalid_argument(format!(
                "refiner needs channels for each of {} level(s), got {}",
                self.levels,
                self.channels.len()
            )));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::invalid_argument(
                "refiner kernel size must be odd".to_string(),
            ));
        }
        if self.in_channels == 0 || self.geo_channels == 0 {
            return Err(Error::invalid_argument(
                "refiner channel counts must be positive".to_string(),
            ));
        }
        if self.conf_logits < 2 {
            return Err(Error::invalid_argument(
                "need at least 2 confidence logits so their entropy is defined".to_string(),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid_argument(
                "level widths must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Channels of the tensor entering encoder level `l`.
    fn enc_in_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.channels[l - 1]
        }
    }

    /// Channels of the tensor entering decoder level `l` from above.
    fn dec_in_channels(&self, l: usize) -> usize {
        if l + 1 == self.levels {
            self.channels[self.levels - 1]
        } else {
            self.channels[l + 1]
        }
    }
}

/// Affine of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl NormParams {
    fn identity(c: usize) -> Self {
        NormParams {
            scale: vec![1.0; c],
            shift: vec![0.0; c],
        }
    }

    fn zeros(c: usize) -> Self {
        NormParams {
            scale: vec![0.0; c],
            shift: vec![0.0; c],
        }
    }
}

/// One conv (+ optional norm affine) block.
#[derive(Debug, Clone)]
pub struct Block {
    pub conv: ConvParams<f64>,
    pub norm: Option<NormParams>,
}

/// All learnable parameters of the refiner.
#[derive(Debug, Clone)]
pub struct RefinerParams {
    pub enc: Vec<Block>,
    pub bneck: Block,
    pub dec_up: Vec<Block>,
    pub dec_mix: Vec<Block>,
    pub head: ConvParams<f64>,
}

fn init_conv(
    rng: &mut ChaCha12Rng,
    kernel_size: usize,
    c_in: usize,
    c_out: usize,
) -> ConvParams<f64> {
    let fan_in = (kernel_size * kernel_size * c_in) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let weights: Vec<f64> = (0..kernel_size * kernel_size * c_in * c_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    ConvParams::new(kernel_size, c_in, c_out, weights, vec![0.0; c_out])
        .expect("valid init shapes")
}

impl RefinerParams {
    /// Fan-in-scaled uniform init, seed-controlled. The head's residual
    /// columns and bias start at zero so the untrained refiner is a no-op;
    /// the confidence columns get a small init because all-zero confidence
    /// weights sit exactly on the entropy maximum where their gradient
    /// vanishes identically.
    pub fn init(cfg: &RefinerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let k = cfg.kernel_size;
        let norm_for = |c: usize| match cfg.norm {
            NormKind::None => None,
            NormKind::SiteNorm => Some(NormParams::identity(c)),
        };
        let mut enc = Vec::new();
        for l in 0..cfg.levels {
            enc.push(Block {
                conv: init_conv(&mut rng, k, cfg.enc_in_channels(l), cfg.channels[l]),
                norm: norm_for(cfg.channels[l]),
            });
        }
        let bneck = Block {
            conv: init_conv(&mut rng, k, cfg.channels[cfg.levels - 1], cfg.channels[cfg.levels - 1]),
            norm: norm_for(cfg.channels[cfg.levels - 1]),
        };
        let mut dec_up = Vec::new();
        let mut dec_mix = Vec::new();
        for l in 0..cfg.levels {
            dec_up.push(Block {
                conv: init_conv(&mut rng, k, cfg.dec_in_channels(l), cfg.channels[l]),
                norm: norm_for(cfg.channels[l]),
            });
            dec_mix.push(Block {
                conv: init_conv(
                    &mut rng,
                    k,
                    cfg.channels[l] + cfg.enc_in_channels(l),
                    cfg.channels[l],
                ),
                norm: norm_for(cfg.channels[l]),
            });
        }
        let out_c = cfg.out_channels();
        let mut head = init_conv(&mut rng, 1, cfg.channels[0], out_c);
        for ci in 0..cfg.channels[0] {
            for co in 0..cfg.geo_channels {
                head.weights[ci * out_c + co] = 0.0;
            }
        }
        Ok(RefinerParams {
            enc,
            bneck,
            dec_up,
            dec_mix,
            head,
        })
    }

    /// Fully zero parameters in the shape of `cfg` (gradient buffers).
    pub fn zeros(cfg: &RefinerConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let norm_for = |c: usize| match cfg.norm {
            NormKind::None => None,
            NormKind::SiteNorm => Some(NormParams::zeros(c)),
        };
        let block = |c_in: usize, c_out: usize| -> Result<Block> {
            Ok(Block {
                conv: ConvParams::zeros(k, c_in, c_out)?,
                norm: norm_for(c_out),
            })
        };
        let mut enc = Vec::new();
        for l in 0..cfg.levels {
            enc.push(block(cfg.enc_in_channels(l), cfg.channels[l])?);
        }
        let bneck = block(cfg.channels[cfg.levels - 1], cfg.channels[cfg.levels - 1])?;
        let mut dec_up = Vec::new();
        let mut dec_mix = Vec::new();
        for l in 0..cfg.levels {
            dec_up.push(block(cfg.dec_in_channels(l), cfg.channels[l])?);
            dec_mix.push(block(cfg.channels[l] + cfg.enc_in_channels(l), cfg.channels[l])?);
        }
        let head = ConvParams::zeros(1, cfg.channels[0], cfg.out_channels())?;
        Ok(RefinerParams {
            enc,
            bneck,
            dec_up,
            dec_mix,
            head,
        })
    }

    /// Zero the head entirely (residual Δ = 0, confidence = bias).
    pub fn with_zero_head(mut self) -> Self {
        for w in self.head.weights.iter_mut() {
            *w = 0.0;
        }
        for b in self.head.bias.iter_mut() {
            *b = 0.0;
        }
        self
    }

    fn blocks(&self) -> Vec<&Block> {
        let mut out: Vec<&Block> = self.enc.iter().collect();
        out.push(&self.bneck);
        for l in 0..self.dec_up.len() {
            out.push(&self.dec_up[l]);
            out.push(&self.dec_mix[l]);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Block> {
        let mut out: Vec<&mut Block> = self.enc.iter_mut().collect();
        out.push(&mut self.bneck);
        for (up, mix) in self.dec_up.iter_mut().zip(self.dec_mix.iter_mut()) {
            out.push(up);
            out.push(mix);
        }
        out
    }

    /// Visit every parameter slice in a fixed order matching
    /// [`Self::tensor_entries`]: encoder blocks, bottleneck, per-level
    /// decoder up then mix, head; within a block: weights, bias, norm scale,
    /// norm shift.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a [f64])) {
        for b in self.blocks() {
            f(&b.conv.weights);
            f(&b.conv.bias);
            if let Some(n) = &b.norm {
                f(&n.scale);
                f(&n.shift);
            }
        }
        f(&self.head.weights);
        f(&self.head.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for b in self.blocks_mut() {
            f(&mut b.conv.weights);
            f(&mut b.conv.bias);
            if let Some(n) = &mut b.norm {
                f(&mut n.scale);
                f(&mut n.shift);
            }
        }
        f(&mut self.head.weights);
        f(&mut self.head.bias);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid_argument(format!(
                "flat buffer has {} values, parameters need {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
        Ok(())
    }

    /// Named tensors for the weight manifest, in visit order.
    pub fn tensor_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push_block = |name: &str, b: &Block| {
            let k = b.conv.kernel_size();
            out.push((
                format!("{name}.weight"),
                vec![k * k, b.conv.c_in(), b.conv.c_out()],
                b.conv.weights.clone(),
            ));
            out.push((format!("{name}.bias"), vec![b.conv.c_out()], b.conv.bias.clone()));
            if let Some(n) = &b.norm {
                out.push((format!("{name}.norm.scale"), vec![n.scale.len()], n.scale.clone()));
                out.push((format!("{name}.norm.shift"), vec![n.shift.len()], n.shift.clone()));
            }
        };
        for (l, b) in self.enc.iter().enumerate() {
            push_block(&format!("enc{l}"), b);
        }
        push_block("bneck", &self.bneck);
        for l in 0..self.dec_up.len() {
            push_block(&format!("dec{l}.up"), &self.dec_up[l]);
            push_block(&format!("dec{l}.mix"), &self.dec_mix[l]);
        }
        out.push((
            "head.weight".to_string(),
            vec![1, self.head.c_in(), self.head.c_out()],
            self.head.weights.clone(),
        ));
        out.push(("head.bias".to_string(), vec![self.head.c_out()], self.head.bias.clone()));
        out
    }

    /// Rebuild from named tensors (shapes must match `cfg`).
    pub fn from_tensor_entries(
        cfg: &RefinerConfig,
        lookup: &dyn Fn(&str) -> Option<Vec<f64>>,
    ) -> Result<Self> {
        let mut params = RefinerParams::zeros(cfg)?;
        let template = params.tensor_entries();
        let mut flat = Vec::with_capacity(params.param_count());
        for (name, dims, data) in &template {
            let loaded = lookup(name)
                .ok_or_else(|| Error::Format(format!("manifest is missing tensor `{name}`")))?;
            let expect: usize = dims.iter().product();
            if loaded.len() != expect {
                return Err(Error::Format(format!(
                    "tensor `{name}` has {} values, expected {expect}",
                    loaded.len()
                )));
            }
            let _ = data;
            flat.extend_from_slice(&loaded);
        }
        params.assign_flat(&flat)?;
        Ok(params)
    }

    /// Check shapes against a config.
    pub fn validate(&self, cfg: &RefinerConfig) -> Result<()> {
        cfg.validate()?;
        let check = |b: &Block, c_in: usize, c_out: usize, what: &str| -> Result<()> {
            if b.conv.c_in() != c_in || b.conv.c_out() != c_out || b.conv.kernel_size() != cfg.kernel_size {
                return Err(Error::invalid_argument(format!(
                    "{what} expects conv {c_in}->{c_out} k={}, got {}->{} k={}",
                    cfg.kernel_size,
                    b.conv.c_in(),
                    b.conv.c_out(),
                    b.conv.kernel_size()
                )));
            }
            match (cfg.norm, &b.norm) {
                (NormKind::SiteNorm, Some(n)) if n.scale.len() == c_out && n.shift.len() == c_out => Ok(()),
                (NormKind::None, None) => Ok(()),
                _ => Err(Error::invalid_argument(format!(
                    "{what} normalization does not match config"
                ))),
            }
        };
        if self.enc.len() != cfg.levels || self.dec_up.len() != cfg.levels || self.dec_mix.len() != cfg.levels {
            return Err(Error::invalid_argument(
                "parameter level count does not match config".to_string(),
            ));
        }
        for l in 0..cfg.levels {
            check(&self.enc[l], cfg.enc_in_channels(l), cfg.channels[l], "encoder")?;
            check(&self.dec_up[l], cfg.dec_in_channels(l), cfg.channels[l], "decoder-up")?;
            check(
                &self.dec_mix[l],
                cfg.channels[l] + cfg.enc_in_channels(l),
                cfg.channels[l],
                "decoder-mix",
            )?;
        }
        check(
            &self.bneck,
            cfg.channels[cfg.levels - 1],
            cfg.channels[cfg.levels - 1],
            "bottleneck",
        )?;
        if self.head.kernel_size() != 1
            || self.head.c_in() != cfg.channels[0]
            || self.head.c_out() != cfg.out_channels()
        {
            return Err(Error::invalid_argument(
                "head shape does not match config".to_string(),
            ));
        }
        Ok(())
    }
}

/// Precomputed coordinate hierarchy and kernel maps for one site set.
/// Building it once and reusing it across forward passes makes repeated
/// inference and training cheap: only the features change.
#[derive(Debug)]
pub struct RefinerPlan {
    cfg: RefinerConfig,
    /// Coordinates entering encoder level l (index 0 = the input sites);
    /// entry `levels` is the bottleneck coordinate set.
    level_coords: Vec<Vec<Coord>>,
    km_enc: Vec<KernelMap>,
    km_bneck: KernelMap,
    km_up: Vec<KernelMap>,
    km_mix: Vec<KernelMap>,
    km_head: KernelMap,
}

impl RefinerPlan {
    pub fn build(input: &SparseTensor<f64>, cfg: &RefinerConfig) -> Result<Self> {
        cfg.validate()?;
        if input.stride() != 1 {
            return Err(Error::invalid_argument(
                "refiner input must be at stride 1".to_string(),
            ));
        }
        if input.is_empty() {
            return Err(Error::invalid_argument(
                "refiner input has no active sites".to_string(),
            ));
        }
        let k = cfg.kernel_size;
        let mut level_coords: Vec<Vec<Coord>> = vec![input.coords().to_vec()];
        let mut level_index: Vec<CoordMap> = Vec::new();
        for l in 0..cfg.levels {
            let coords = &level_coords[l];
            let stride = 1u32 << l;
            let next = downsample_coords_raw(coords, stride);
            level_coords.push(next);
            let index = if l == 0 {
                input.index().clone()
            } else {
                CoordMap::build(&level_coords[l]).expect("unique by construction")
            };
            level_index.push(index);
        }
        level_index.push(CoordMap::build(&level_coords[cfg.levels]).expect("unique"));

        let mut km_enc = Vec::new();
        for l in 0..cfg.levels {
            km_enc.push(KernelMap::build_impl(
                &level_index[l],
                level_coords[l].len(),
                &level_coords[l + 1],
                k,
                2,
                1 << l,
                1 << (l + 1),
                1 << l,
            ));
        }
        let bneck_stride = 1u32 << cfg.levels;
        let km_bneck = KernelMap::build_impl(
            &level_index[cfg.levels],
            level_coords[cfg.levels].len(),
            &level_coords[cfg.levels],
            k,
            1,
            bneck_stride,
            bneck_stride,
            bneck_stride,
        );
        let mut km_up = Vec::new();
        let mut km_mix = Vec::new();
        for l in 0..cfg.levels {
            // Upsample from the level-(l+1) grid back onto the cached
            // level-l coordinates; offsets scale with the output stride.
            km_up.push(KernelMap::build_impl(
                &level_index[l + 1],
                level_coords[l + 1].len(),
                &level_coords[l],
                k,
                1,
                1 << (l + 1),
                1 << l,
                1 << l,
            ));
            km_mix.push(KernelMap::build_impl(
                &level_index[l],
                level_coords[l].len(),
                &level_coords[l],
                k,
                1,
                1 << l,
                1 << l,
                1 << l,
            ));
        }
        let km_head = KernelMap::build_impl(
            &level_index[0],
            level_coords[0].len(),
            &level_coords[0],
            1,
            1,
            1,
            1,
            1,
        );
        Ok(RefinerPlan {
            cfg: cfg.clone(),
            level_coords,
            km_enc,
            km_bneck,
            km_up,
            km_mix,
            km_head,
        })
    }

    pub fn cfg(&self) -> &RefinerConfig {
        &self.cfg
    }

    /// Sites at each stride level (entry 0 = input sites).
    pub fn level_sizes(&self) -> Vec<usize> {
        self.level_coords.iter().map(|c| c.len()).collect()
    }

    /// Coordinates entering encoder level `l`.
    pub fn level_coords(&self, l: usize) -> &[Coord] {
        &self.level_coords[l]
    }

    /// Total kernel-map pairs across all convolutions.
    pub fn total_pairs(&self) -> usize {
        self.km_enc.iter().map(|k| k.total_pairs()).sum::<usize>()
            + self.km_bneck.total_pairs()
            + self.km_up.iter().map(|k| k.total_pairs()).sum::<usize>()
            + self.km_mix.iter().map(|k| k.total_pairs()).sum::<usize>()
            + self.km_head.total_pairs()
    }

    /// Exact multiply–adds of one forward pass with these parameters.
    pub fn forward_madds(&self, params: &RefinerParams) -> u64 {
        let mut total = 0u64;
        for (l, b) in params.enc.iter().enumerate() {
            total += self.km_enc[l].madd_count(b.conv.c_in(), b.conv.c_out());
        }
        total += self
            .km_bneck
            .madd_count(params.bneck.conv.c_in(), params.bneck.conv.c_out());
        for l in 0..params.dec_up.len() {
            total += self.km_up[l].madd_count(
                params.dec_up[l].conv.c_in(),
                params.dec_up[l].conv.c_out(),
            );
            total += self.km_mix[l].madd_count(
                params.dec_mix[l].conv.c_in(),
                params.dec_mix[l].conv.c_out(),
            );
        }
        total += self.km_head.madd_count(params.head.c_in(), params.head.c_out());
        total
    }
}

/// One block's saved forward state.
struct BlockFwd {
    cache: Option<NormCache<f64>>,
    /// post-norm, pre-relu
    normed: Vec<f64>,
    /// post-relu activations
    act: Vec<f64>,
}

fn block_forward(
    input: &[f64],
    block: &Block,
    km: &KernelMap,
    counter: &MaddCounter,
) -> Result<BlockFwd> {
    let pre = conv_feats(input, &block.conv, km, counter)?;
    let (normed, cache) = match &block.norm {
        Some(n) => {
            let (out, cache) = norm_feats(&pre, block.conv.c_out(), &n.scale, &n.shift)?;
            (out, Some(cache))
        }
        None => (pre, None),
    };
    let act = relu(&normed);
    Ok(BlockFwd { cache, normed, act })
}

/// Backward through one block. Returns the gradient w.r.t. the block input
/// and accumulates parameter gradients into `grad`.
fn block_backward(
    input: &[f64],
    block: &Block,
    grad: &mut Block,
    fwd: &BlockFwd,
    km: &KernelMap,
    g_act: &[f64],
) -> Result<Vec<f64>> {
    let g_normed = relu_backward(&fwd.normed, g_act);
    let g_pre = match (&block.norm, &fwd.cache) {
        (Some(n), Some(cache)) => {
            let (d_scale, d_shift, g_pre) =
                site_norm_backward(cache, &n.scale, &g_normed, block.conv.c_out());
            let gn = grad.norm.as_mut().expect("gradient shape matches");
            for (a, b) in gn.scale.iter_mut().zip(d_scale.iter()) {
                *a += b;
            }
            for (a, b) in gn.shift.iter_mut().zip(d_shift.iter()) {
                *a += b;
            }
            g_pre
        }
        _ => g_normed,
    };
    let (d_w, d_b, d_x) = conv_feats_backward(input, &block.conv, km, &g_pre)?;
    for (a, b) in grad.conv.weights.iter_mut().zip(d_w.iter()) {
        *a += b;
    }
    for (a, b) in grad.conv.bias.iter_mut().zip(d_b.iter()) {
        *a += b;
    }
    Ok(d_x)
}

/// Forward through one block keeping only the activations.
fn block_forward_lean(
    input: &[f64],
    block: &Block,
    km: &KernelMap,
    counter: &MaddCounter,
) -> Result<Vec<f64>> {
    let mut feats = conv_feats(input, &block.conv, km, counter)?;
    if let Some(n) = &block.norm {
        let (out, _) = norm_feats(&feats, block.conv.c_out(), &n.scale, &n.shift)?;
        feats = out;
    }
    for v in feats.iter_mut() {
        *v = v.max(0.0);
    }
    Ok(feats)
}

/// Memory-lean forward pass (no trace): intermediates are dropped as soon
/// as they are consumed.
pub fn forward_feats(
    plan: &RefinerPlan,
    params: &RefinerParams,
    input_feats: &[f64],
    counter: &MaddCounter,
) -> Result<Vec<f64>> {
    let cfg = &plan.cfg;
    params.validate(cfg)?;
    if input_feats.len() != plan.level_coords[0].len() * cfg.in_channels {
        return Err(Error::invalid_argument(
            "input feature width does not match plan".to_string(),
        ));
    }
    // Encoder; keep each level's input for the skip connections.
    let mut skips: Vec<Option<Vec<f64>>> = vec![None; cfg.levels];
    let mut current: Vec<f64> = Vec::new();
    for l in 0..cfg.levels {
        let level_in: &[f64] = if l == 0 { input_feats } else { &current };
        let act = block_forward_lean(level_in, &params.enc[l], &plan.km_enc[l], counter)?;
        if l > 0 {
            skips[l] = Some(std::mem::take(&mut current));
        }
        current = act;
    }
    current = block_forward_lean(&current, &params.bneck, &plan.km_bneck, counter)?;
    for l in (0..cfg.levels).rev() {
        let up = block_forward_lean(&current, &params.dec_up[l], &plan.km_up[l], counter)?;
        drop(std::mem::take(&mut current));
        let skip_owned;
        let skip: &[f64] = match skips[l].take() {
            Some(s) => {
                skip_owned = s;
                &skip_owned
            }
            None => input_feats,
        };
        let c_up = cfg.channels[l];
        let c_skip = cfg.enc_in_channels(l);
        let n = plan.level_coords[l].len();
        let mut catted = vec![0.0f64; n * (c_up + c_skip)];
        crate::par::for_each_chunk_mut(&mut catted, c_up + c_skip, |i, out| {
            out[..c_up].copy_from_slice(&up[i * c_up..(i + 1) * c_up]);
            out[c_up..].copy_from_slice(&skip[i * c_skip..(i + 1) * c_skip]);
        });
        drop(up);
        current = block_forward_lean(&catted, &params.dec_mix[l], &plan.km_mix[l], counter)?;
    }
    conv_feats(&current, &params.head, &plan.km_head, counter)
}

/// Saved forward state for a full backward pass.
pub struct RefinerTrace {
    enc_inputs: Vec<Vec<f64>>,
    enc: Vec<BlockFwd>,
    bneck: BlockFwd,
    up: Vec<BlockFwd>,
    cat: Vec<Vec<f64>>,
    mix: Vec<BlockFwd>,
    out: Vec<f64>,
}

impl RefinerTrace {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

/// Forward pass over raw input features, keeping everything backward needs.
pub fn forward_with_trace(
    plan: &RefinerPlan,
    params: &RefinerParams,
    input_feats: &[f64],
    counter: &MaddCounter,
) -> Result<RefinerTrace> {
    let cfg = &plan.cfg;
    params.validate(cfg)?;
    if input_feats.len() != plan.level_coords[0].len() * cfg.in_channels {
        return Err(Error::invalid_argument(
            "input feature width does not match plan".to_string(),
        ));
    }
    let mut enc_inputs: Vec<Vec<f64>> = vec![input_feats.to_vec()];
    let mut enc = Vec::new();
    for l in 0..cfg.levels {
        let fwd = block_forward(&enc_inputs[l], &params.enc[l], &plan.km_enc[l], counter)?;
        enc_inputs.push(fwd.act.clone());
        enc.push(fwd);
    }
    let bneck = block_forward(&enc_inputs[cfg.levels], &params.bneck, &plan.km_bneck, counter)?;
    let mut up: Vec<Option<BlockFwd>> = (0..cfg.levels).map(|_| None).collect();
    let mut cat: Vec<Vec<f64>> = vec![Vec::new(); cfg.levels];
    let mut mix: Vec<Option<BlockFwd>> = (0..cfg.levels).map(|_| None).collect();
    let mut current = bneck.act.clone();
    for l in (0..cfg.levels).rev() {
        let up_fwd = block_forward(&current, &params.dec_up[l], &plan.km_up[l], counter)?;
        let skip = &enc_inputs[l];
        let c_up = cfg.channels[l];
        let c_skip = cfg.enc_in_channels(l);
        let n = plan.level_coords[l].len();
        let mut catted = vec![0.0f64; n * (c_up + c_skip)];
        crate::par::for_each_chunk_mut(&mut catted, c_up + c_skip, |i, out| {
            out[..c_up].copy_from_slice(&up_fwd.act[i * c_up..(i + 1) * c_up]);
            out[c_up..].copy_from_slice(&skip[i * c_skip..(i + 1) * c_skip]);
        });
        let mix_fwd = block_forward(&catted, &params.dec_mix[l], &plan.km_mix[l], counter)?;
        current = mix_fwd.act.clone();
        up[l] = Some(up_fwd);
        cat[l] = catted;
        mix[l] = Some(mix_fwd);
    }
    let out = conv_feats(&current, &params.head, &plan.km_head, counter)?;
    Ok(RefinerTrace {
        enc_inputs,
        enc,
        bneck,
        up: up.into_iter().map(|b| b.unwrap()).collect(),
        cat,
        mix: mix.into_iter().map(|b| b.unwrap()).collect(),
        out,
    })
}

/// Reverse-mode pass. Accumulates parameter gradients into `grad` and
/// returns the gradient with respect to the input features.
pub fn backward_from_trace(
    plan: &RefinerPlan,
    params: &RefinerParams,
    trace: &RefinerTrace,
    upstream: &[f64],
    grad: &mut RefinerParams,
) -> Result<Vec<f64>> {
    let cfg = &plan.cfg;
    let n0 = plan.level_coords[0].len();
    if upstream.len() != n0 * cfg.out_channels() {
        return Err(Error::invalid_argument(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            n0 * cfg.out_channels()
        )));
    }
    // Head (1x1 conv).
    let head_in = &trace.mix[0].act;
    let (d_w, d_b, mut g_current) =
        conv_feats_backward(head_in, &params.head, &plan.km_head, upstream)?;
    for (a, b) in grad.head.weights.iter_mut().zip(d_w.iter()) {
        *a += b;
    }
    for (a, b) in grad.head.bias.iter_mut().zip(d_b.iter()) {
        *a += b;
    }
    // Decoder, finest level first (reverse of the forward order).
    let mut g_skip: Vec<Vec<f64>> = vec![Vec::new(); cfg.levels];
    for l in 0..cfg.levels {
        let g_cat = block_backward(
            &trace.cat[l],
            &params.dec_mix[l],
            &mut grad.dec_mix[l],
            &trace.mix[l],
            &plan.km_mix[l],
            &g_current,
        )?;
        let c_up = cfg.channels[l];
        let c_skip = cfg.enc_in_channels(l);
        let n = plan.level_coords[l].len();
        let mut g_up = vec![0.0f64; n * c_up];
        let mut g_sk = vec![0.0f64; n * c_skip];
        for i in 0..n {
            let row = &g_cat[i * (c_up + c_skip)..(i + 1) * (c_up + c_skip)];
            g_up[i * c_up..(i + 1) * c_up].copy_from_slice(&row[..c_up]);
            g_sk[i * c_skip..(i + 1) * c_skip].copy_from_slice(&row[c_up..]);
        }
        g_skip[l] = g_sk;
        let dec_input: &[f64] = if l + 1 == cfg.levels {
            &trace.bneck.act
        } else {
            &trace.mix[l + 1].act
        };
        g_current = block_backward(
            dec_input,
            &params.dec_up[l],
            &mut grad.dec_up[l],
            &trace.up[l],
            &plan.km_up[l],
            &g_up,
        )?;
    }
    // Bottleneck.
    let mut g_enc_out = block_backward(
        &trace.enc_inputs[cfg.levels],
        &params.bneck,
        &mut grad.bneck,
        &trace.bneck,
        &plan.km_bneck,
        &g_current,
    )?;
    // Encoder, coarsest level first; each level's input also received the
    // skip-connection gradient.
    for l in (0..cfg.levels).rev() {
        let mut g_in = block_backward(
            &trace.enc_inputs[l],
            &params.enc[l],
            &mut grad.enc[l],
            &trace.enc[l],
            &plan.km_enc[l],
            &g_enc_out,
        )?;
        for (a, b) in g_in.iter_mut().zip(g_skip[l].iter()) {
            *a += b;
        }
        g_enc_out = g_in;
    }
    Ok(g_enc_out)
}

/// Run the refiner: output has the same coordinates and row order as the
/// input, with `geo_channels + conf_logits` channels (ΔY then confidence).
pub fn run_refiner(
    input: &SparseTensor<f64>,
    params: &RefinerParams,
    cfg: &RefinerConfig,
) -> Result<SparseTensor<f64>> {
    run_refiner_counted(input, params, cfg, &MaddCounter::new())
}

/// [`run_refiner`] with an external multiply–add counter.
pub fn run_refiner_counted(
    input: &SparseTensor<f64>,
    params: &RefinerParams,
    cfg: &RefinerConfig,
    counter: &MaddCounter,
) -> Result<SparseTensor<f64>> {
    if input.channels() != cfg.in_channels {
        return Err(Error::invalid_argument(format!(
            "refiner expects {} input channels, tensor has {}",
            cfg.in_channels,
            input.channels()
        )));
    }
    let plan = RefinerPlan::build(input, cfg)?;
    run_refiner_with_plan(&plan, input, params, counter)
}

/// Forward pass reusing a prebuilt plan (the input must have the same
/// coordinates the plan was built from).
pub fn run_refiner_with_plan(
    plan: &RefinerPlan,
    input: &SparseTensor<f64>,
    params: &RefinerParams,
    counter: &MaddCounter,
) -> Result<SparseTensor<f64>> {
    let out = forward_feats(plan, params, input.feats(), counter)?;
    input.with_feats(out, plan.cfg.out_channels())
}

/// Exact reverse-mode gradients of [`run_refiner`]: parameter gradients and
/// input-feature gradients.
pub fn refiner_backward(
    input: &SparseTensor<f64>,
    params: &RefinerParams,
    cfg: &RefinerConfig,
    upstream: &[f64],
) -> Result<(RefinerParams, Vec<f64>)> {
    if input.channels() != cfg.in_channels {
        return Err(Error::invalid_argument(
            "refiner input width mismatch".to_string(),
        ));
    }
    let plan = RefinerPlan::build(input, cfg)?;
    let trace = forward_with_trace(&plan, params, input.feats(), &MaddCounter::new())?;
    let mut grad = RefinerParams::zeros(cfg)?;
    let d_input = backward_from_trace(&plan, params, &trace, upstream, &mut grad)?;
    Ok((grad, d_input))
}
