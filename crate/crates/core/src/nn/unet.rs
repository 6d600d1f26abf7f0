//! The denoising U-Net, its guidance twin, and the shared trunk.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use super::layers::{timestep_features, Attention, AttentionKind, AttentionSpec, Builder, Context, Conv, Ctx, Dense, Norm, ResBlock, ResBlockSpec};
use crate::dpe::DpeCache;
use crate::engine::{concat, ParamId, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::rangemap::SensorConfig;
use crate::textenc::{HashTextEncoder, TextCondition, TEXT_WIDTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Downsampling `(rows, cols)` after every level but the last.
    pub strides: Vec<(usize, usize)>,
    pub attention: Vec<AttentionKind>,
    pub heads: Vec<usize>,
    pub groups: usize,
    pub res_blocks: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub dpe_terms: usize,
    pub use_dpe: bool,
    pub rope: bool,
    /// Vertical field of view in degrees, for the direction encoding.
    pub fov_up: f64,
    pub fov_down: f64,
}

impl UNetConfig {
    /// The full-size layout: 64 base channels, multipliers (1,2,4,4).
    pub fn full_scale() -> Self {
        Self {
            in_channels: 2,
            out_channels: 2,
            base_channels: 64,
            channel_mults: vec![1, 2, 4, 4],
            strides: vec![(1, 2), (2, 2), (2, 2)],
            attention: vec![AttentionKind::Linear, AttentionKind::Linear, AttentionKind::Linear, AttentionKind::Vanilla],
            heads: vec![2, 4, 8, 8],
            groups: 32,
            res_blocks: 2,
            time_dim: 384,
            text_dim: TEXT_WIDTH,
            dpe_terms: 4,
            use_dpe: true,
            rope: false,
            fov_up: 10.0,
            fov_down: -30.0,
        }
    }

    /// Same topology at a size that trains on one CPU core.
    pub fn desk(base_channels: usize) -> Self {
        Self { base_channels, groups: 4, res_blocks: 1, ..Self::full_scale() }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Input height and width must be multiples of these.
    pub fn divisor(&self) -> (usize, usize) {
        self.strides.iter().fold((1, 1), |(a, b), (h, w)| (a * h, b * w))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.levels();
        if n == 0 {
            return invalid("network needs at least one level");
        }
        if self.strides.len() != n - 1 || self.attention.len() != n || self.heads.len() != n {
            return invalid("strides, attention kinds and heads must match the level count");
        }
        if self.base_channels == 0 || self.res_blocks == 0 || self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return invalid("channel counts, groups and block counts must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 == 1 {
            return invalid("time embedding width must be even");
        }
        for l in 0..n {
            if !self.channels(l).is_multiple_of(self.heads[l]) {
                return invalid(format!("level {l}: {} channels not divisible by {} heads", self.channels(l), self.heads[l]));
            }
        }
        if self.strides.iter().any(|(h, w)| *h == 0 || *w == 0) {
            return invalid("strides must be positive");
        }
        if self.use_dpe && self.dpe_terms == 0 {
            return invalid("direction encoding needs at least one Fourier term");
        }
        if !(self.fov_up > self.fov_down) {
            return invalid("fov_up must exceed fov_down");
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize], channels: usize) -> Result<()> {
        let (dh, dw) = self.divisor();
        if shape.len() != 4 || shape[1] != channels || !shape[2].is_multiple_of(dh) || !shape[3].is_multiple_of(dw) || shape[2] == 0 || shape[3] == 0 {
            return invalid(format!("input {shape:?} must be [B, {channels}, H, W] with H % {dh} == 0 and W % {dw} == 0"));
        }
        Ok(())
    }

    /// Spatial size of every level for an `h × w` input.
    pub fn level_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(h, w)];
        for (sh, sw) in &self.strides {
            let (a, b) = *out.last().unwrap();
            out.push((a / sh, b / sw));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    attn: Attention,
}

/// How each attention site finds its keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Denoiser,
    Guidance,
    Control,
}

/// Stem plus encoder levels; a control branch reuses just this part.
#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    stem: Conv,
    levels: Vec<Level>,
}

#[derive(Debug, Clone)]
struct Trunk {
    encoder: Encoder,
    mid1: ResBlock,
    mid_attn: Attention,
    mid2: ResBlock,
    decoder: Vec<Level>,
    out_norm: Norm,
    out_conv: Conv,
}

fn text_for(cfg: &UNetConfig, role: Role, kind: AttentionKind) -> Option<usize> {
    (role == Role::Denoiser && kind == AttentionKind::Vanilla).then_some(cfg.text_dim)
}

fn block_spec(cfg: &UNetConfig, cin: usize, cout: usize, temb: bool) -> ResBlockSpec {
    ResBlockSpec { cin, cout, groups: cfg.groups, temb_dim: temb.then(|| cfg.temb_dim()), dpe_channels: cfg.use_dpe.then(|| 4 * cfg.dpe_terms) }
}

fn attn_spec(cfg: &UNetConfig, level: usize, kind: AttentionKind, role: Role) -> AttentionSpec {
    AttentionSpec { kind, channels: cfg.channels(level), heads: cfg.heads[level], groups: cfg.groups, text_dim: text_for(cfg, role, kind), rope: cfg.rope }
}

impl Encoder {
    fn new(b: &mut Builder, cfg: &UNetConfig, in_channels: usize, role: Role) -> Self {
        let temb = role != Role::Guidance;
        let stem = Conv::new(b, "stem", in_channels, cfg.base_channels, 3, false);
        let mut levels = Vec::new();
        let mut c = cfg.base_channels;
        for l in 0..cfg.levels() {
            let co = cfg.channels(l);
            let level = b.scope(&format!("enc{l}"), |b| {
                let blocks = (0..cfg.res_blocks)
                    .map(|i| {
                        let cin = if i == 0 { c } else { co };
                        ResBlock::new(b, &format!("res{i}"), &block_spec(cfg, cin, co, temb))
                    })
                    .collect();
                Level { blocks, attn: Attention::new(b, "attn", &attn_spec(cfg, l, cfg.attention[l], role)) }
            });
            levels.push(level);
            c = co;
        }
        Encoder { stem, levels }
    }
}

/// Per-call inputs shared by every block.
struct Frame<'g> {
    temb: Option<Var<'g>>,
    dpe: Vec<Option<Var<'g>>>,
}

/// Time conditioning: sinusoid features through a two-layer MLP.
#[derive(Debug, Clone)]
struct TimeMlp {
    fc1: Dense,
    fc2: Dense,
    dim: usize,
}

impl TimeMlp {
    fn new(b: &mut Builder, cfg: &UNetConfig) -> Self {
        b.scope("time", |b| TimeMlp {
            fc1: Dense::new(b, "fc1", cfg.time_dim, cfg.temb_dim()),
            fc2: Dense::new(b, "fc2", cfg.temb_dim(), cfg.temb_dim()),
            dim: cfg.time_dim,
        })
    }

    /// Returns the embedding after the trailing SiLU that every block
    /// applies before its own projection.
    fn forward<'g>(&self, cx: Ctx<'g, '_>, ts: &[f64]) -> Var<'g> {
        let e = cx.g.constant(timestep_features(ts, self.dim));
        self.fc2.forward(cx, self.fc1.forward(cx, e).silu()).silu()
    }
}

fn make_frame<'g>(cx: Ctx<'g, '_>, cfg: &UNetConfig, cache: &DpeCache, h: usize, w: usize, temb: Option<Var<'g>>) -> Result<Frame<'g>> {
    let dpe = if cfg.use_dpe {
        cfg.level_sizes(h, w)
            .into_iter()
            .map(|(lh, lw)| {
                let sensor = SensorConfig { height: lh, width: lw, fov_up: cfg.fov_up, fov_down: cfg.fov_down, depth_min: 1.0, depth_max: 2.0 };
                cache.get(&sensor, cfg.dpe_terms).map(|t| Some(cx.g.constant((*t).clone())))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![None; cfg.levels()]
    };
    Ok(Frame { temb, dpe })
}

fn run_level<'g>(cx: Ctx<'g, '_>, level: &Level, mut h: Var<'g>, frame: &Frame<'g>, l: usize, ctx: Context<'_, 'g>) -> Result<Var<'g>> {
    for block in &level.blocks {
        h = block.forward(cx, h, frame.temb, frame.dpe[l])?;
    }
    level.attn.forward(cx, h, ctx)
}

impl Encoder {
    /// Runs the stem and every level; returns the per-level taps (before
    /// downsampling) and the deepest activation.
    fn forward<'c, 'g>(
        &self,
        cx: Ctx<'g, '_>,
        cfg: &UNetConfig,
        x: Var<'g>,
        frame: &Frame<'g>,
        ctx_of: &dyn Fn(usize) -> Context<'c, 'g>,
    ) -> Result<Vec<Var<'g>>> {
        let mut h = self.stem.forward(cx, x);
        let mut taps = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            h = run_level(cx, level, h, frame, l, ctx_of(l))?;
            taps.push(h);
            if let Some((sh, sw)) = cfg.strides.get(l) {
                h = h.avg_pool(*sh, *sw);
            }
        }
        Ok(taps)
    }
}

impl Trunk {
    fn new(b: &mut Builder, cfg: &UNetConfig, role: Role, zero_out: bool) -> Self {
        let temb = role != Role::Guidance;
        let encoder = Encoder::new(b, cfg, cfg.in_channels, role);
        let last = cfg.levels() - 1;
        let cl = cfg.channels(last);
        let mid_kind = if role == Role::Denoiser { AttentionKind::Vanilla } else { cfg.attention[last] };
        let (mid1, mid_attn, mid2) = b.scope("mid", |b| {
            (
                ResBlock::new(b, "res0", &block_spec(cfg, cl, cl, temb)),
                Attention::new(b, "attn", &AttentionSpec { kind: mid_kind, text_dim: text_for(cfg, role, mid_kind), ..attn_spec(cfg, last, mid_kind, role) }),
                ResBlock::new(b, "res1", &block_spec(cfg, cl, cl, temb)),
            )
        });
        let mut decoder = Vec::new();
        let mut c = cl;
        for l in (0..cfg.levels()).rev() {
            let co = cfg.channels(l);
            let level = b.scope(&format!("dec{l}"), |b| {
                let blocks = (0..cfg.res_blocks)
                    .map(|i| {
                        let cin = if i == 0 { c + co } else { co };
                        ResBlock::new(b, &format!("res{i}"), &block_spec(cfg, cin, co, temb))
                    })
                    .collect();
                let dec_role = if role == Role::Denoiser { Role::Denoiser } else { Role::Control };
                Level { blocks, attn: Attention::new(b, "attn", &attn_spec(cfg, l, cfg.attention[l], dec_role)) }
            });
            decoder.push(level);
            c = co;
        }
        decoder.reverse();
        let out_norm = Norm::new(b, "out_norm", cfg.base_channels, cfg.groups);
        let out_conv = Conv::new(b, "out_conv", cfg.base_channels, cfg.out_channels, 3, zero_out);
        Trunk { encoder, mid1, mid_attn, mid2, decoder, out_norm, out_conv }
    }

    fn middle<'g>(&self, cx: Ctx<'g, '_>, h: Var<'g>, frame: &Frame<'g>, last: usize, ctx: Context<'_, 'g>) -> Result<Var<'g>> {
        let h = self.mid1.forward(cx, h, frame.temb, frame.dpe[last])?;
        let h = self.mid_attn.forward(cx, h, ctx)?;
        self.mid2.forward(cx, h, frame.temb, frame.dpe[last])
    }

    fn decode<'c, 'g>(
        &self,
        cx: Ctx<'g, '_>,
        cfg: &UNetConfig,
        mut h: Var<'g>,
        skips: &[Var<'g>],
        frame: &Frame<'g>,
        ctx_of: &dyn Fn(usize) -> Context<'c, 'g>,
    ) -> Result<Var<'g>> {
        for l in (0..cfg.levels()).rev() {
            h = concat(&[h, skips[l]], 1).scale(FRAC_1_SQRT_2);
            h = run_level(cx, &self.decoder[l], h, frame, l, ctx_of(l))?;
            if l > 0 {
                let (sh, sw) = cfg.strides[l - 1];
                h = h.upsample_bilinear(sh, sw);
            }
        }
        Ok(self.out_conv.forward(cx, self.out_norm.forward(cx, h).silu()))
    }
}

/// Encoder and middle activations of one denoiser call, ready to decode.
pub struct Encoded<'g> {
    /// Encoder level taps followed by the middle output.
    pub pyramid: Vec<Var<'g>>,
    frame: Frame<'g>,
    tokens: Option<Vec<Var<'g>>>,
}

pub struct DenoiserOutput<'g> {
    pub v: Var<'g>,
    pub pyramid: Vec<Var<'g>>,
}

/// The text-conditioned denoising network.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: UNetConfig,
    trunk: Trunk,
    time: TimeMlp,
    null_text: ParamId,
    cache: std::rc::Rc<DpeCache>,
}

impl Denoiser {
    /// Registers parameters under `dn.` in `store`.
    pub fn new(config: UNetConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(store, seed, "dn");
        let trunk = Trunk::new(&mut b, &config, Role::Denoiser, false);
        let time = TimeMlp::new(&mut b, &config);
        let null = HashTextEncoder::default().null_row();
        let null_text = b.add("null_text", Tensor::new([1, TEXT_WIDTH], null));
        Ok(Self { config, trunk, time, null_text, cache: Default::default() })
    }

    fn token_vars<'g>(&self, cx: Ctx<'g, '_>, text: &[TextCondition]) -> Vec<Var<'g>> {
        text.iter()
            .map(|c| match c {
                TextCondition::Tokens(e) => cx.g.constant(Tensor::new([e.tokens(), TEXT_WIDTH], e.as_slice().to_vec())),
                TextCondition::Null => cx.p(self.null_text),
            })
            .collect()
    }

    fn context<'a, 'g>(&self, tokens: &'a Option<Vec<Var<'g>>>, kind: AttentionKind) -> Context<'a, 'g> {
        match (kind, tokens) {
            (AttentionKind::Vanilla, Some(t)) => Context::Tokens(t),
            _ => Context::Own,
        }
    }

    /// Encoder and middle pass. `text` holds one condition per sample;
    /// `None` makes every attention site attend to its own features.
    pub fn encode<'g>(&self, cx: Ctx<'g, '_>, x_t: Var<'g>, t: &[f64], text: Option<&[TextCondition]>) -> Result<Encoded<'g>> {
        let cfg = &self.config;
        let shape = x_t.shape();
        cfg.check_input(&shape, cfg.in_channels)?;
        if t.len() != shape[0] {
            return invalid(format!("{} timesteps for a batch of {}", t.len(), shape[0]));
        }
        if let Some(tx) = text {
            if tx.len() != shape[0] {
                return invalid(format!("{} prompts for a batch of {}", tx.len(), shape[0]));
            }
        }
        let temb = self.time.forward(cx, t);
        let frame = make_frame(cx, cfg, &self.cache, shape[2], shape[3], Some(temb))?;
        let tokens = text.map(|tx| self.token_vars(cx, tx));
        let ctx_of = |l: usize| self.context(&tokens, cfg.attention[l]);
        let mut pyramid = self.trunk.encoder.forward(cx, cfg, x_t, &frame, &ctx_of)?;
        let last = cfg.levels() - 1;
        let deepest = *pyramid.last().unwrap();
        let mid = self.trunk.middle(cx, deepest, &frame, last, self.context(&tokens, AttentionKind::Vanilla))?;
        pyramid.push(mid);
        Ok(Encoded { pyramid, frame, tokens })
    }

    /// Decoder pass. `skip_residuals`, when given, are added to the
    /// encoder skips level by level.
    pub fn decode<'g>(&self, cx: Ctx<'g, '_>, enc: &Encoded<'g>, skip_residuals: Option<&[Var<'g>]>) -> Result<Var<'g>> {
        let cfg = &self.config;
        let levels = cfg.levels();
        let mut skips: Vec<Var<'g>> = enc.pyramid[..levels].to_vec();
        if let Some(res) = skip_residuals {
            if res.len() != levels {
                return invalid(format!("{} skip residuals for {levels} levels", res.len()));
            }
            for (s, r) in skips.iter_mut().zip(res) {
                if s.shape() != r.shape() {
                    return Err(Error::ShapeMismatch { expected: s.shape(), got: r.shape() });
                }
                *s = s.add(*r);
            }
        }
        let ctx_of = |l: usize| self.context(&enc.tokens, cfg.attention[l]);
        self.trunk.decode(cx, cfg, enc.pyramid[levels], &skips, &enc.frame, &ctx_of)
    }

    pub fn forward<'g>(&self, cx: Ctx<'g, '_>, x_t: Var<'g>, t: &[f64], text: Option<&[TextCondition]>) -> Result<DenoiserOutput<'g>> {
        let enc = self.encode(cx, x_t, t, text)?;
        let v = self.decode(cx, &enc, None)?;
        Ok(DenoiserOutput { v, pyramid: enc.pyramid })
    }
}

/// Control branch encoder: the denoiser's encoder layout with its own stem
/// and time MLP.
#[derive(Debug, Clone)]
pub struct ControlEncoder {
    encoder: Encoder,
    time: TimeMlp,
    config: UNetConfig,
    cache: std::rc::Rc<DpeCache>,
}

impl ControlEncoder {
    pub fn new(config: &UNetConfig, condition_channels: usize, b: &mut Builder) -> Self {
        let encoder = Encoder::new(b, config, condition_channels, Role::Control);
        let time = TimeMlp::new(b, config);
        Self { encoder, time, config: config.clone(), cache: Default::default() }
    }

    pub fn forward<'g>(&self, cx: Ctx<'g, '_>, cond: Var<'g>, t: &[f64], channels: usize) -> Result<Vec<Var<'g>>> {
        let shape = cond.shape();
        self.config.check_input(&shape, channels)?;
        let temb = self.time.forward(cx, t);
        let frame = make_frame(cx, &self.config, &self.cache, shape[2], shape[3], Some(temb))?;
        self.encoder.forward(cx, &self.config, cond, &frame, &|_| Context::Own)
    }
}

/// Reconstructs the clean image from itself plus the denoiser's features.
#[derive(Debug, Clone)]
pub struct GuidanceNet {
    pub config: UNetConfig,
    trunk: Trunk,
    cache: std::rc::Rc<DpeCache>,
}

pub struct GuidanceOutput<'g> {
    pub recon: Var<'g>,
    pub pyramid: Vec<Var<'g>>,
}

impl GuidanceNet {
    /// Registers parameters under `gn.` in `store`.
    pub fn new(config: UNetConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(store, seed, "gn");
        let trunk = Trunk::new(&mut b, &config, Role::Guidance, true);
        Ok(Self { config, trunk, cache: Default::default() })
    }

    /// `dn_pyramid` must come from a denoiser call on the same batch.
    pub fn forward<'g>(&self, cx: Ctx<'g, '_>, x0: Var<'g>, dn_pyramid: &[Var<'g>]) -> Result<GuidanceOutput<'g>> {
        let cfg = &self.config;
        let shape = x0.shape();
        cfg.check_input(&shape, cfg.in_channels)?;
        let levels = cfg.levels();
        if dn_pyramid.len() != levels + 1 {
            return invalid(format!("denoiser pyramid has {} entries, expected {}", dn_pyramid.len(), levels + 1));
        }
        let sizes = cfg.level_sizes(shape[2], shape[3]);
        for (l, f) in dn_pyramid.iter().enumerate() {
            let (h, w) = sizes[l.min(levels - 1)];
            let c = cfg.channels(l.min(levels - 1));
            let want = vec![shape[0], c, h, w];
            if f.shape() != want {
                return Err(Error::ShapeMismatch { expected: want, got: f.shape() });
            }
        }
        let frame = make_frame(cx, cfg, &self.cache, shape[2], shape[3], None)?;
        let mut pyramid = self.trunk.encoder.forward(cx, cfg, x0, &frame, &|l| Context::Features(dn_pyramid[l]))?;
        let deepest = *pyramid.last().unwrap();
        let mid = self.trunk.middle(cx, deepest, &frame, levels - 1, Context::Features(dn_pyramid[levels]))?;
        pyramid.push(mid);
        let recon = self.trunk.decode(cx, cfg, mid, &pyramid[..levels], &frame, &|_| Context::Own)?;
        Ok(GuidanceOutput { recon, pyramid })
    }
}
