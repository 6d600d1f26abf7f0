//! Parameterised building blocks: convolutions, dense maps, group norm,
//! residual blocks and attention.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{concat, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};

/// Binds a parameter store to a graph for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'g, 's> {
    pub g: &'g Graph,
    pub store: &'s ParamStore,
    pub trainable: bool,
}

impl<'g, 's> Ctx<'g, 's> {
    pub fn new(g: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Self { g, store, trainable }
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        self.g.param(self.store, id, self.trainable)
    }
}

/// Registers named, initialised parameters under a prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, prefix: &str) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: prefix.to_owned() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_owned() } else { format!("{saved}.{name}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_owned() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, value)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape.to_vec(), std, &mut self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Self {
        b.scope(name, |b| {
            let shape = [cout, cin, k, k];
            let weight = if zero { b.zeros("weight", &shape) } else { b.randn("weight", &shape, (1.0 / (cin * k * k) as f64).sqrt()) };
            Conv { weight, bias: b.zeros("bias", &[cout]), spec: ConvSpec::default() }
        })
    }

    pub fn forward<'g>(&self, cx: Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.conv2d(cx.p(self.weight), Some(cx.p(self.bias)), self.spec)
    }
}

/// Affine map on the last axis of `[B, in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out: usize,
}

impl Dense {
    pub fn new(b: &mut Builder, name: &str, inp: usize, out: usize) -> Self {
        b.scope(name, |b| Dense { weight: b.randn("weight", &[1, out, inp], (1.0 / inp as f64).sqrt()), bias: b.zeros("bias", &[1, out]), out })
    }

    pub fn forward<'g>(&self, cx: Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let (n, inp) = (s[0], s[1]);
        let y = x.reshape(&[1, n, inp]).matmul(cx.p(self.weight), false, true).reshape(&[n, self.out]);
        y.add_bcast(cx.p(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, groups: usize) -> Self {
        let groups = fit_groups(channels, groups);
        b.scope(name, |b| Norm { gamma: b.add("gamma", Tensor::full([channels], 1.0)), beta: b.zeros("beta", &[channels]), groups })
    }

    pub fn forward<'g>(&self, cx: Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.group_norm(self.groups, cx.p(self.gamma), cx.p(self.beta))
    }
}

/// Largest divisor of `channels` not above `groups`.
fn fit_groups(channels: usize, groups: usize) -> usize {
    (1..=groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Directional encoding input of one residual block.
#[derive(Debug, Clone)]
pub struct DpeGate {
    pub alpha: ParamId,
    pub projection: ParamId,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Option<Dense>,
    dpe: Option<DpeGate>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    cout: usize,
}

pub struct ResBlockSpec {
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub temb_dim: Option<usize>,
    pub dpe_channels: Option<usize>,
}

impl ResBlock {
    pub fn new(b: &mut Builder, name: &str, spec: &ResBlockSpec) -> Self {
        let ResBlockSpec { cin, cout, groups, temb_dim, dpe_channels } = *spec;
        b.scope(name, |b| ResBlock {
            norm1: Norm::new(b, "norm1", cin, groups),
            conv1: Conv::new(b, "conv1", cin, cout, 3, false),
            temb: temb_dim.map(|d| Dense::new(b, "temb", d, cout)),
            dpe: dpe_channels
                .map(|c| DpeGate { alpha: b.zeros("dpe_alpha", &[1]), projection: b.randn("dpe_proj", &[cout, c, 1, 1], (1.0 / c as f64).sqrt()) }),
            norm2: Norm::new(b, "norm2", cout, groups),
            conv2: Conv::new(b, "conv2", cout, cout, 3, true),
            skip: (cin != cout).then(|| Conv::new(b, "skip", cin, cout, 1, false)),
            cout,
        })
    }

    /// `temb` is `[B, D]` (already passed through SiLU); `dpe` is
    /// `[1, 4K, H, W]` at this block's resolution.
    pub fn forward<'g>(&self, cx: Ctx<'g, '_>, x: Var<'g>, temb: Option<Var<'g>>, dpe: Option<Var<'g>>) -> Result<Var<'g>> {
        let mut h = self.conv1.forward(cx, self.norm1.forward(cx, x).silu());
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let b = t.shape()[0];
            h = h.add_bcast(proj.forward(cx, t).reshape(&[b, self.cout, 1, 1]));
        }
        if let (Some(gate), Some(d)) = (&self.dpe, dpe) {
            h = crate::dpe::apply_dpe(h, d, cx.p(gate.alpha), cx.p(gate.projection))?;
        }
        let h = self.conv2.forward(cx, self.norm2.forward(cx, h).silu());
        let skip = match &self.skip {
            Some(s) => s.forward(cx, x),
            None => x,
        };
        Ok(h.add(skip))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Softmax over key positions first, then a `d × d` context: cost linear
    /// in the number of positions.
    Linear,
    /// Full `softmax(QKᵀ/√d)` attention.
    Vanilla,
}

/// Where keys and values come from.
#[derive(Clone, Copy)]
pub enum Context<'a, 'g> {
    /// The normalised input features themselves.
    Own,
    /// Another feature map with the same channel count and batch.
    Features(Var<'g>),
    /// Per-sample token matrices `[n_b, text_dim]`.
    Tokens(&'a [Var<'g>]),
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: Norm,
    up: Conv,
    down: Conv,
}

impl FeedForward {
    fn forward<'g>(&self, cx: Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        let h = self.down.forward(cx, self.up.forward(cx, self.norm.forward(cx, x)).silu());
        h.add(x)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    kind: AttentionKind,
    heads: usize,
    channels: usize,
    rope: bool,
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    text_k: Option<ParamId>,
    text_v: Option<ParamId>,
    out: Conv,
    ffn: FeedForward,
}

pub struct AttentionSpec {
    pub kind: AttentionKind,
    pub channels: usize,
    pub heads: usize,
    pub groups: usize,
    pub text_dim: Option<usize>,
    pub rope: bool,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, spec: &AttentionSpec) -> Self {
        let AttentionSpec { kind, channels: c, heads, groups, text_dim, rope } = *spec;
        assert!(c % heads == 0, "{c} channels not divisible by {heads} heads");
        b.scope(name, |b| Attention {
            kind,
            heads,
            channels: c,
            rope,
            norm: Norm::new(b, "norm", c, groups),
            q: Conv::new(b, "q", c, c, 1, false),
            k: Conv::new(b, "k", c, c, 1, false),
            v: Conv::new(b, "v", c, c, 1, false),
            text_k: text_dim.map(|d| b.randn("text_k", &[1, c, d], (1.0 / d as f64).sqrt())),
            text_v: text_dim.map(|d| b.randn("text_v", &[1, c, d], (1.0 / d as f64).sqrt())),
            out: Conv::new(b, "out", c, c, 1, true),
            ffn: b.scope("ffn", |b| FeedForward {
                norm: Norm::new(b, "norm", c, groups),
                up: Conv::new(b, "up", c, 2 * c, 1, false),
                down: Conv::new(b, "down", 2 * c, c, 1, true),
            }),
        })
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn forward<'g>(&self, cx: Ctx<'g, '_>, x: Var<'g>, context: Context<'_, 'g>) -> Result<Var<'g>> {
        let (b, c, h, w) = x.value().dims4();
        let (heads, d, l) = (self.heads, c / self.heads, h * w);
        let xn = self.norm.forward(cx, x);
        let q = self.q.forward(cx, xn).reshape(&[b * heads, d, l]);
        let scale = 1.0 / (d as f64).sqrt();

        let attended = match context {
            Context::Own | Context::Features(_) => {
                let src = match context {
                    Context::Features(f) => {
                        let fs = f.shape();
                        if fs.len() != 4 || fs[0] != b || fs[1] != c {
                            return invalid(format!("context features {fs:?} do not match {:?}", [b, c, h, w]));
                        }
                        f
                    }
                    _ => xn,
                };
                let lk = src.shape()[2] * src.shape()[3];
                let k = self.k.forward(cx, src).reshape(&[b * heads, d, lk]);
                let v = self.v.forward(cx, src).reshape(&[b * heads, d, lk]);
                let (q, k) = if self.rope && matches!(context, Context::Own) && self.kind == AttentionKind::Vanilla {
                    let angles = Rc::new(rope_angles(d, l));
                    (q.rotary(Rc::clone(&angles)), k.rotary(angles))
                } else {
                    (q, k)
                };
                self.mix(q, k, v, scale)
            }
            Context::Tokens(rows) => {
                if rows.len() != b {
                    return invalid(format!("{} token sets for a batch of {b}", rows.len()));
                }
                let (Some(tk), Some(tv)) = (self.text_k, self.text_v) else {
                    return invalid("attention block was built without a text projection");
                };
                let (wk, wv) = (cx.p(tk), cx.p(tv));
                let mut outs = Vec::with_capacity(b);
                for (bi, r) in rows.iter().enumerate() {
                    let rs = r.shape();
                    if rs.len() != 2 || rs[0] == 0 {
                        return invalid("token context needs at least one row");
                    }
                    let n = rs[0];
                    let r3 = r.reshape(&[1, n, rs[1]]);
                    let k = wk.matmul(r3, false, true).reshape(&[heads, d, n]);
                    let v = wv.matmul(r3, false, true).reshape(&[heads, d, n]);
                    let qb = q.narrow(0, bi * heads, heads);
                    outs.push(self.mix(qb, k, v, scale));
                }
                concat(&outs, 0)
            }
        };
        let o = self.out.forward(cx, attended.reshape(&[b, c, h, w])).add(x);
        debug_assert_eq!(self.channels, c);
        Ok(self.ffn.forward(cx, o))
    }

    /// `q` is `[N, d, L]`, `k`/`v` are `[N, d, n]`; returns `[N, d, L]`.
    fn mix<'g>(&self, q: Var<'g>, k: Var<'g>, v: Var<'g>, scale: f64) -> Var<'g> {
        match self.kind {
            AttentionKind::Vanilla => {
                let weights = q.matmul(k, true, false).scale(scale).softmax_last();
                v.matmul(weights, false, true)
            }
            AttentionKind::Linear => {
                let ctx = k.softmax_last().matmul(v, false, true).scale(scale);
                ctx.matmul(q, true, false)
            }
        }
    }

    /// Attention weights of the vanilla form for inspection: `[N, L, n]`.
    pub fn weights<'g>(&self, cx: Ctx<'g, '_>, x: Var<'g>, tokens: Var<'g>) -> Result<Var<'g>> {
        let (b, c, h, w) = x.value().dims4();
        let Some(tk) = self.text_k else { return invalid("no text projection") };
        let d = c / self.heads;
        let q = self.q.forward(cx, self.norm.forward(cx, x)).reshape(&[b * self.heads, d, h * w]);
        let ts = tokens.shape();
        let k = cx.p(tk).matmul(tokens.reshape(&[1, ts[0], ts[1]]), false, true).reshape(&[self.heads, d, ts[0]]);
        Ok(q.narrow(0, 0, self.heads).matmul(k, true, false).scale(1.0 / (d as f64).sqrt()).softmax_last())
    }
}

/// Rotation angles for channel pair `i` at flattened position `p`.
fn rope_angles(d: usize, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d / 2 * l);
    for i in 0..d / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / d as f64);
        out.extend((0..l).map(|p| p as f64 * freq));
    }
    out
}

/// `[B]` timesteps to `[B, dim]` interleaved `sin, cos` features at
/// geometric frequencies `10000^(-i/(dim/2))`.
pub fn timestep_features(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = 10000f64.powf(-(i as f64) / half as f64);
            let (s, c) = (t * freq).sin_cos();
            data.push(s);
            data.push(c);
        }
    }
    Tensor::new(vec![ts.len(), dim], data)
}
