//! Encoder-decoder segmentation network whose skip connections are either
//! concatenation, a localized feature aggregation module, or dropped.
//!
//! Level `i` (0 = full resolution) has `base_channels * 2^i` channels; the
//! bottleneck has `base_channels * 2^depth`. Every 3x3 convolution uses
//! padding 1 so logits keep the input resolution.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::costmodel::attention_flops_local;
use crate::error::{Error, Result};
use crate::lfam::{global_attention_oracle, lfam_forward, BoundLfam, LfamConfig, LfamParams, ResidualSource};
use crate::nn::{channel_norm, concat_channels, he_normal, maxpool2x2, BoundConv, ConvParams};
use crate::real::Real;
use crate::rng::{seeded, Rng64};
use crate::tensor::Tensor;

/// How the encoder skip map of one level reaches the decoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkipMode {
    Concat,
    Lfam(LfamConfig),
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// One entry per level, index 0 being the full-resolution level.
    pub skips: Vec<SkipMode>,
    /// After an Lfam fusion, concatenate the module output with the
    /// upsampled decoder map instead of replacing it.
    pub fuse_concat: bool,
    /// Insert a per-channel affine normalization after every 3x3 conv.
    pub channel_norm: bool,
}

impl UNetConfig {
    /// All levels use concatenation skips.
    pub fn new(in_channels: usize, num_classes: usize, base_channels: usize, depth: usize) -> Self {
        UNetConfig {
            in_channels,
            num_classes,
            base_channels,
            depth,
            skips: vec![SkipMode::Concat; depth],
            fuse_concat: false,
            channel_norm: false,
        }
    }

    /// Uses `mode` at every level.
    pub fn with_skips(mut self, mode: SkipMode) -> Self {
        self.skips = vec![mode; self.depth];
        self
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.width(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::config("unet depth and base_channels must be >= 1"));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("unet in_channels and num_classes must be >= 1"));
        }
        if self.skips.len() != self.depth {
            return Err(Error::config(format!(
                "unet has depth {} but {} skip modes",
                self.depth,
                self.skips.len()
            )));
        }
        for skip in &self.skips {
            if let SkipMode::Lfam(cfg) = skip {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by 2^depth = {f}"
            )));
        }
        Ok(())
    }

    /// First 8 bytes (little-endian) of the SHA-256 of the canonical JSON
    /// encoding of the config.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Input channels of the first decoder conv at `level`.
    pub fn fused_channels(&self, level: usize) -> usize {
        let c = self.width(level);
        match &self.skips[level] {
            SkipMode::Concat => 2 * c,
            SkipMode::Lfam(_) if self.fuse_concat => 2 * c,
            SkipMode::Lfam(_) | SkipMode::None => c,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    convs: [(ConvIdx, Option<NormIdx>); 2],
}

#[derive(Clone, Copy, Debug)]
struct DecoderIdx {
    up: ConvIdx,
    lfam: Option<[ConvIdx; 3]>,
    block: BlockIdx,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    He { fan_in: usize },
    Zero,
    One,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: [usize; 4],
    init: Init,
}

/// Parameter names, shapes and their positions, derived from a config.
#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    encoder: Vec<BlockIdx>,
    bottleneck: BlockIdx,
    /// Indexed by level.
    decoder: Vec<DecoderIdx>,
    head: ConvIdx,
}

impl Layout {
    fn new(cfg: &UNetConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: [usize; 4], init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let conv = |add: &mut dyn FnMut(String, [usize; 4], Init) -> usize,
                        prefix: &str,
                        out: usize,
                        inp: usize,
                        k: usize| ConvIdx {
            weight: add(format!("{prefix}.weight"), [out, inp, k, k], Init::He { fan_in: inp * k * k }),
            bias: add(format!("{prefix}.bias"), [out, 1, 1, 1], Init::Zero),
            stride: 1,
            padding: k / 2,
        };
        let norm = cfg.channel_norm;
        let block = |add: &mut dyn FnMut(String, [usize; 4], Init) -> usize,
                         prefix: &str,
                         inp: usize,
                         out: usize| {
            let mut convs = [(ConvIdx { weight: 0, bias: 0, stride: 1, padding: 1 }, None); 2];
            for (j, slot) in convs.iter_mut().enumerate() {
                let c_in = if j == 0 { inp } else { out };
                let c = conv(add, &format!("{prefix}.conv{}", j + 1), out, c_in, 3);
                let n = norm.then(|| NormIdx {
                    gamma: add(format!("{prefix}.norm{}.gamma", j + 1), [out, 1, 1, 1], Init::One),
                    beta: add(format!("{prefix}.norm{}.beta", j + 1), [out, 1, 1, 1], Init::Zero),
                });
                *slot = (c, n);
            }
            BlockIdx { convs }
        };

        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut prev = cfg.in_channels;
        for level in 0..cfg.depth {
            encoder.push(block(&mut add, &format!("enc{level}"), prev, cfg.width(level)));
            prev = cfg.width(level);
        }
        let bottleneck = block(&mut add, "bottleneck", prev, cfg.bottleneck_channels());
        let mut decoder = Vec::with_capacity(cfg.depth);
        for level in (0..cfg.depth).rev() {
            let c = cfg.width(level);
            let up = ConvIdx {
                weight: add(format!("dec{level}.up.weight"), [2 * c, c, 2, 2], Init::He { fan_in: 2 * c }),
                bias: add(format!("dec{level}.up.bias"), [c, 1, 1, 1], Init::Zero),
                stride: 2,
                padding: 0,
            };
            let lfam = match &cfg.skips[level] {
                SkipMode::Lfam(l) => {
                    let d = l.projection_width(c);
                    Some(["query", "key", "value"].map(|role| conv(&mut add, &format!("dec{level}.lfam.{role}"), d, c, 1)))
                }
                _ => None,
            };
            let blk = block(&mut add, &format!("dec{level}"), cfg.fused_channels(level), c);
            decoder.push(DecoderIdx { up, lfam, block: blk });
        }
        decoder.reverse();
        let head = conv(&mut add, "head", cfg.num_classes, cfg.width(0), 1);
        Layout { specs, encoder, bottleneck, decoder, head }
    }
}

/// Which attention implementation evaluates Lfam fusions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionImpl {
    #[default]
    Windowed,
    /// Unrestricted scalar-loop attention over the whole map, ignoring the
    /// local range. Not differentiable; for oracle comparisons only.
    GlobalOracle,
}

/// Named parameters of a network built from a [`UNetConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    config: UNetConfig,
    fingerprint: u64,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Builds a network with He-normal conv weights and zero biases.
/// Parameters are drawn in layout order from one seeded stream.
pub fn build_unet<T: Real>(cfg: &UNetConfig, seed: u64) -> Result<ModelState<T>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = seeded(seed);
    let params = layout.specs.iter().map(|s| init_param(s, &mut rng)).collect();
    Ok(ModelState {
        config: cfg.clone(),
        fingerprint: cfg.fingerprint(),
        names: layout.specs.into_iter().map(|s| s.name).collect(),
        params,
    })
}

fn init_param<T: Real>(spec: &ParamSpec, rng: &mut Rng64) -> Tensor<T> {
    match spec.init {
        Init::Zero => Tensor::zeros(spec.shape),
        Init::One => Tensor::full(spec.shape, T::ONE),
        Init::He { fan_in } => he_normal(spec.shape, fan_in as f64, rng),
    }
}

impl<T: Real> ModelState<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces the parameter list, checking names and shapes.
    pub fn from_params(cfg: &UNetConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        if named.len() != layout.specs.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.push(t);
        }
        Ok(ModelState {
            config: cfg.clone(),
            fingerprint: cfg.fingerprint(),
            names: layout.specs.into_iter().map(|s| s.name).collect(),
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            fingerprint: self.fingerprint,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every parameter on the tape, tracked when `track`.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone().with_requires_grad(track))).collect()
    }

    /// Logits for `x` of shape `(n, in_channels, h, w)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, AttentionImpl::Windowed)
    }

    pub fn forward_with(&self, x: &Tensor<T>, attention: AttentionImpl) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = forward_tape(self, &mut tape, &vars, xv, attention)?;
        Ok(tape.value(out).clone())
    }

    /// Analytic cost of one forward pass over an `h x w` image.
    pub fn count_flops_and_params(&self, h: usize, w: usize) -> Result<ModelCost> {
        count_cost(&self.config, h, w).map(|flops| ModelCost { flops, params: self.num_params() as u64 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelCost {
    pub flops: u64,
    pub params: u64,
}

fn bound_conv(vars: &[Var], idx: ConvIdx) -> BoundConv {
    BoundConv { weight: vars[idx.weight], bias: vars[idx.bias], stride: idx.stride, padding: idx.padding }
}

fn run_block<T: Real>(tape: &mut Tape<T>, vars: &[Var], block: &BlockIdx, mut x: Var) -> Result<Var> {
    for (conv, norm) in &block.convs {
        x = bound_conv(vars, *conv).conv2d(tape, x)?;
        if let Some(n) = norm {
            x = channel_norm(tape, x, vars[n.gamma], vars[n.beta])?;
        }
        x = tape.relu(x)?;
    }
    Ok(x)
}

/// Records the network on `tape` using parameter leaves `vars` (as returned
/// by [`ModelState::bind`]) and returns the logits node.
pub fn forward_tape<T: Real>(
    model: &ModelState<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    x: Var,
    attention: AttentionImpl,
) -> Result<Var> {
    let cfg = &model.config;
    if vars.len() != model.params.len() {
        return Err(Error::Contract(format!(
            "forward needs {} parameter nodes, got {}",
            model.params.len(),
            vars.len()
        )));
    }
    let (_, c, h, w) = tape.value(x).dims();
    if c != cfg.in_channels {
        return Err(Error::shape(format!("input has {c} channels, network expects {}", cfg.in_channels)));
    }
    cfg.check_input(h, w)?;
    let layout = Layout::new(cfg);

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut cur = x;
    for block in &layout.encoder {
        let s = run_block(tape, vars, block, cur)?;
        skips.push(s);
        cur = maxpool2x2(tape, s)?.0;
    }
    cur = run_block(tape, vars, &layout.bottleneck, cur)?;
    for level in (0..cfg.depth).rev() {
        let dec = &layout.decoder[level];
        let up = bound_conv(vars, dec.up).upconv2x2(tape, cur)?;
        let skip = skips[level];
        let fused = match (&cfg.skips[level], dec.lfam) {
            (SkipMode::Concat, _) => concat_channels(tape, skip, up)?,
            (SkipMode::None, _) => up,
            (SkipMode::Lfam(lcfg), Some([q, k, v])) => {
                let bound = BoundLfam { query: bound_conv(vars, q), key: bound_conv(vars, k), value: bound_conv(vars, v) };
                let out = match attention {
                    AttentionImpl::Windowed => lfam_forward(tape, skip, up, &bound, lcfg)?,
                    AttentionImpl::GlobalOracle => global_fusion(model, tape, skip, up, [q, k, v], lcfg)?,
                };
                if cfg.fuse_concat {
                    concat_channels(tape, out, up)?
                } else {
                    out
                }
            }
            (SkipMode::Lfam(_), None) => unreachable!("layout allocates lfam projections"),
        };
        cur = run_block(tape, vars, &dec.block, fused)?;
    }
    bound_conv(vars, layout.head).conv2d(tape, cur)
}

fn global_fusion<T: Real>(
    model: &ModelState<T>,
    tape: &mut Tape<T>,
    encoder: Var,
    decoder: Var,
    idx: [ConvIdx; 3],
    cfg: &LfamConfig,
) -> Result<Var> {
    let conv = |i: ConvIdx| ConvParams {
        weight: model.params[i.weight].clone(),
        bias: model.params[i.bias].clone(),
        stride: 1,
        padding: 0,
    };
    let params = LfamParams { query: conv(idx[0]), key: conv(idx[1]), value: conv(idx[2]) };
    let (p, q) = (tape.value(encoder).clone(), tape.value(decoder).clone());
    let aggregated = if cfg.swap_qkv {
        global_attention_oracle(&q, &p, &params)?
    } else {
        global_attention_oracle(&p, &q, &params)?
    };
    let y = tape.constant(aggregated);
    match cfg.residual_source {
        ResidualSource::Encoder => tape.add(y, encoder),
        ResidualSource::Decoder => tape.add(y, decoder),
        ResidualSource::None => Ok(y),
    }
}

fn conv_flops(out: usize, inp: usize, k: usize, oh: usize, ow: usize) -> u64 {
    2 * (out * inp * k * k * oh * ow) as u64
}

/// Flops of one forward pass over an `h x w` image: every convolution,
/// transposed convolution, projection and windowed attention.
pub fn count_cost(cfg: &UNetConfig, h: usize, w: usize) -> Result<u64> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let block = |inp: usize, out: usize, s: (usize, usize)| {
        conv_flops(out, inp, 3, s.0, s.1) + conv_flops(out, out, 3, s.0, s.1)
    };
    let size = |level: usize| (h >> level, w >> level);
    let mut flops = 0u64;
    let mut prev = cfg.in_channels;
    for level in 0..cfg.depth {
        flops += block(prev, cfg.width(level), size(level));
        prev = cfg.width(level);
    }
    flops += block(prev, cfg.bottleneck_channels(), size(cfg.depth));
    for level in (0..cfg.depth).rev() {
        let c = cfg.width(level);
        let (lh, lw) = size(level);
        // Each input pixel of the coarser map feeds a 2x2 output patch.
        flops += 2 * (2 * c * c * 4 * (lh / 2) * (lw / 2)) as u64;
        if let SkipMode::Lfam(l) = &cfg.skips[level] {
            let d = l.projection_width(c);
            flops += 3 * conv_flops(d, c, 1, lh, lw);
            flops += attention_flops_local(lh, lw, d, l.local_range);
        }
        flops += block(cfg.fused_channels(level), c, (lh, lw));
    }
    flops += conv_flops(cfg.num_classes, cfg.width(0), 1, h, w);
    Ok(flops)
}

#[cfg(test)]
mod tests;
