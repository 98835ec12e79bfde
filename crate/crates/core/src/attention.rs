//! Windowed multi-head self-attention with relative position bias, and the
//! shifted-window transformer block built from it.

use std::sync::Arc;

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;

use crate::nn::{dropout, Bound, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::patch::{ravel, unravel, window_partition, window_reverse, TokenGrid, WindowLayout};
use crate::scalar::Scalar;
use crate::tensor::{numel, Graph, Tensor, Var};

/// Denominator under the square root of the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleMode {
    /// `sqrt(C / heads)`
    #[default]
    PerHead,
    /// `sqrt(C)`
    FullChannels,
}

impl ScaleMode {
    pub fn factor(self, channels: usize, heads: usize) -> f64 {
        let d = match self {
            ScaleMode::PerHead => channels / heads,
            ScaleMode::FullChannels => channels,
        };
        1.0 / (d as f64).sqrt()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::PerHead => "per_head",
            ScaleMode::FullChannels => "full_c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_head" => Ok(ScaleMode::PerHead),
            "full_c" | "full_C" => Ok(ScaleMode::FullChannels),
            _ => Err(Error::Config(format!("unknown scale variant {s:?} (per_head | full_c)"))),
        }
    }
}

/// Which part of the network evaluated an attention projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Encoder,
    Generation,
    Classification,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QkSite {
    pub stream: Stream,
    pub level: usize,
    pub shifted: bool,
}

/// Instrumentation gathered during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardStats {
    /// One entry per query/key projection evaluated.
    pub qk_sites: Vec<QkSite>,
    /// Attention maps built by reference branches, in evaluation order.
    pub attention_produced: Vec<Var>,
    /// Attention maps read by follower branches, in evaluation order.
    pub attention_consumed: Vec<Var>,
    /// Dropout randomness; `None` disables dropout.
    pub rng: Option<ChaCha8Rng>,
}

impl ForwardStats {
    pub fn training(rng: ChaCha8Rng) -> Self {
        ForwardStats { rng: Some(rng), ..Default::default() }
    }

    pub(crate) fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if rate > 0.0 => dropout(g, x, rate, rng),
            _ => Ok(x),
        }
    }

    pub fn qk_count(&self, stream: Stream) -> usize {
        self.qk_sites.iter().filter(|s| s.stream == stream).count()
    }

    pub fn qk_count_at(&self, stream: Stream, level: usize) -> usize {
        self.qk_sites.iter().filter(|s| s.stream == stream && s.level == level).count()
    }
}

/// Query/key and value projections for one attention module. Follower
/// branches of interactive attention have no query/key projection.
#[derive(Clone, Debug)]
pub struct AttentionProjection {
    pub qk: Option<Linear>,
    pub v: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl AttentionProjection {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
        with_qk: bool,
        value_bias: bool,
    ) -> Result<Self> {
        check_heads(channels, heads)?;
        let qk = if with_qk {
            Some(Linear::new(store, init, &format!("{name}.qk"), channels, 2 * channels, true)?)
        } else {
            None
        };
        let v = Linear::new(store, init, &format!("{name}.v"), channels, channels, value_bias)?;
        Ok(AttentionProjection { qk, v, heads, channels })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

pub(crate) fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels < heads || !channels.is_multiple_of(heads) {
        return Err(Error::Config(format!("{channels} channels cannot be split into {heads} heads")));
    }
    Ok(())
}

/// Learnable per-head bias indexed by the relative offset of two tokens in a window.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    pub table: ParamId,
    pub index: Arc<[usize]>,
    pub window: Vec<usize>,
    pub heads: usize,
}

impl RelativePositionBias {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, window: &[usize], heads: usize) -> Result<Self> {
        let rows = relative_table_size(window);
        let table = store.add(format!("{name}.rel_bias"), Tensor::zeros([rows, heads]))?;
        Ok(RelativePositionBias { table, index: relative_index(window).into(), window: window.to_vec(), heads })
    }

    /// Bias `[heads, T, T]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let t = numel(&self.window);
        let rows = g.gather_rows(p.var(self.table), self.index.clone())?;
        let per_head = g.transpose_last(rows)?;
        g.reshape(per_head, vec![self.heads, t, t])
    }
}

pub fn relative_table_size(window: &[usize]) -> usize {
    window.iter().map(|w| 2 * w - 1).product()
}

/// Table row for every ordered in-window token pair `(i, j)`, flattened `i * T + j`.
pub fn relative_index(window: &[usize]) -> Vec<usize> {
    let d = window.len();
    let t = numel(window);
    let ext: Vec<usize> = window.iter().map(|w| 2 * w - 1).collect();
    let (mut ci, mut cj, mut rel) = (vec![0; d], vec![0; d], vec![0; d]);
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        unravel(i, window, &mut ci);
        for j in 0..t {
            unravel(j, window, &mut cj);
            for ax in 0..d {
                rel[ax] = ci[ax] + window[ax] - 1 - cj[ax];
            }
            out.push(ravel(&rel, &ext));
        }
    }
    out
}

/// Row-stochastic attention weights `[batch * windows, heads, T, T]`.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub values: Var,
    pub batch: usize,
    pub windows: usize,
    pub heads: usize,
    pub tokens: usize,
}

/// `[BW, T, C] -> [BW, heads, T, C / heads]`
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(Error::shape(format!("cannot split {s:?} into {heads} heads")));
    }
    let r = g.reshape(x, vec![s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[BW, heads, T, d] -> [BW, T, heads * d]`
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, vec![s[0], s[2], s[1] * s[3]])
}

/// Projects windows to per-head queries and keys, recording the site.
pub fn project_qk<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    qk: &Linear,
    x: Var,
    heads: usize,
    site: QkSite,
    stats: &mut ForwardStats,
) -> Result<(Var, Var)> {
    stats.qk_sites.push(site);
    let y = qk.forward(g, p, x)?;
    let c = qk.in_dim;
    let qs = g.split(y, 2, &[c, c])?;
    Ok((split_heads(g, qs[0], heads)?, split_heads(g, qs[1], heads)?))
}

/// `softmax(q kᵀ · scale + bias + mask)` over the last axis.
pub fn attention_weights<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    bias: Option<Var>,
    mask: Option<Var>,
    scale: f64,
    windows: usize,
) -> Result<AttentionMap> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || g.shape(k) != qs.as_slice() || !qs[0].is_multiple_of(windows) {
        return Err(Error::shape(format!("attention q {qs:?} / k {:?} for {windows} windows", g.shape(k))));
    }
    let (bw, heads, t) = (qs[0], qs[1], qs[2]);
    let kt = g.transpose_last(k)?;
    let s = g.matmul(q, kt)?;
    let mut s = g.scale(s, T::lit(scale));
    if let Some(b) = bias {
        s = g.add(s, b)?;
    }
    if let Some(m) = mask {
        let batch = bw / windows;
        let r = g.reshape(s, vec![batch, windows, heads, t, t])?;
        let r = g.add(r, m)?;
        s = g.reshape(r, vec![bw, heads, t, t])?;
    }
    let values = g.softmax(s, 3)?;
    Ok(AttentionMap { values, batch: bw / windows, windows, heads, tokens: t })
}

/// Mixes per-head values `[BW, heads, T, d]` with `a`; heads are concatenated back to `[BW, T, C]`.
pub fn apply_attention<T: Scalar>(g: &mut Graph<T>, a: &AttentionMap, v: Var) -> Result<Var> {
    let vs = g.shape(v).to_vec();
    if vs.len() != 4 || vs[0] != a.batch * a.windows || vs[1] != a.heads || vs[2] != a.tokens {
        return Err(Error::shape(format!(
            "attention map [{}, {}, {t}, {t}] cannot mix values {vs:?}",
            a.batch * a.windows,
            a.heads,
            t = a.tokens
        )));
    }
    let o = g.matmul(a.values, v)?;
    merge_heads(g, o)
}

/// Multi-head self-attention inside windows `[BW, T, C]`. Returns the
/// concatenated head outputs and the attention weights.
#[allow(clippy::too_many_arguments)]
pub fn window_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: Var,
    proj: &AttentionProjection,
    bias: Option<Var>,
    mask: Option<Var>,
    scale: ScaleMode,
    windows: usize,
    site: QkSite,
    stats: &mut ForwardStats,
) -> Result<(Var, AttentionMap)> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || xs[2] != proj.channels {
        return Err(Error::shape(format!("attention input {xs:?} vs {} channels", proj.channels)));
    }
    let qk = proj.qk.as_ref().ok_or_else(|| Error::invalid("self-attention needs a query/key projection"))?;
    let (q, k) = project_qk(g, p, qk, x, proj.heads, site, stats)?;
    let a = attention_weights(g, q, k, bias, mask, scale.factor(proj.channels, proj.heads), windows)?;
    let v = proj.v.forward(g, p, x)?;
    let vh = split_heads(g, v, proj.heads)?;
    let out = apply_attention(g, &a, vh)?;
    Ok((out, a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: Vec<usize>,
    pub mlp_ratio: usize,
    pub scale: ScaleMode,
    pub ln_eps: f64,
    /// Dropout on both residual branches.
    pub drop_rate: f64,
}

/// One W-MSA or SW-MSA module with its MLP.
#[derive(Clone, Debug)]
pub struct SubBlock {
    pub layout: WindowLayout,
    pub norm1: LayerNorm,
    pub attn: AttentionProjection,
    pub bias: RelativePositionBias,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SubBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &TransformerBlockConfig,
        layout: WindowLayout,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(SubBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, cfg.ln_eps)?,
            attn: AttentionProjection::new(store, init, &format!("{name}.attn"), c, cfg.heads, true, true)?,
            bias: RelativePositionBias::new(store, &format!("{name}.attn"), &layout.window, cfg.heads)?,
            proj: Linear::new(store, init, &format!("{name}.proj"), c, c, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, cfg.ln_eps)?,
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), c, cfg.mlp_ratio * c)?,
            layout,
        })
    }
}

/// Additive mask leaf for a layout, if it is shifted.
pub(crate) fn mask_var<T: Scalar>(g: &mut Graph<T>, layout: &WindowLayout) -> Option<Var> {
    layout.mask_tensor::<T>().map(|m| g.constant(m))
}

/// Regular-window then shifted-window sub-block, each
/// `x += MSA(LN(x)); x += MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub cfg: TransformerBlockConfig,
    pub subs: [SubBlock; 2],
}

impl SwinBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &TransformerBlockConfig,
        axes: &[usize],
    ) -> Result<Self> {
        check_heads(cfg.channels, cfg.heads)?;
        let regular = WindowLayout::for_grid(axes, &cfg.window, false)?;
        let shifted = WindowLayout::for_grid(axes, &cfg.window, true)?;
        Ok(SwinBlock {
            cfg: cfg.clone(),
            subs: [
                SubBlock::new(store, init, &format!("{name}.wmsa"), cfg, regular)?,
                SubBlock::new(store, init, &format!("{name}.swmsa"), cfg, shifted)?,
            ],
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: &TokenGrid,
        stream: Stream,
        stats: &mut ForwardStats,
    ) -> Result<(TokenGrid, AttentionMap, AttentionMap)> {
        if x.shape.channels != self.cfg.channels || x.shape.axes != self.subs[0].layout.axes {
            return Err(Error::shape(format!(
                "block for {:?}x{} applied to grid {}",
                self.subs[0].layout.axes, self.cfg.channels, x.shape
            )));
        }
        let mut cur = x.clone();
        let mut maps = Vec::with_capacity(2);
        for (i, sb) in self.subs.iter().enumerate() {
            let h = sb.norm1.forward(g, p, cur.tokens)?;
            let hw = window_partition(g, &cur.with_tokens(h), &sb.layout)?;
            let bias = sb.bias.forward(g, p)?;
            let mask = mask_var(g, &sb.layout);
            let site = QkSite { stream, level: x.level, shifted: i == 1 };
            let (o, a) = window_self_attention(
                g,
                p,
                hw,
                &sb.attn,
                Some(bias),
                mask,
                self.cfg.scale,
                sb.layout.num_windows(),
                site,
                stats,
            )?;
            let o = sb.proj.forward(g, p, o)?;
            let o = stats.dropout(g, o, self.cfg.drop_rate)?;
            let back = window_reverse(g, o, &sb.layout, &x.shape, x.level)?;
            let t = g.add(cur.tokens, back.tokens)?;
            let n = sb.norm2.forward(g, p, t)?;
            let m = sb.mlp.forward(g, p, n)?;
            let m = stats.dropout(g, m, self.cfg.drop_rate)?;
            let t = g.add(t, m)?;
            cur = cur.with_tokens(t);
            maps.push(a);
        }
        let shifted = maps.pop().unwrap();
        let regular = maps.pop().unwrap();
        Ok((cur, regular, shifted))
    }

    /// Zeroes the attention output projections and the second MLP layers,
    /// which turns the block into the identity map.
    pub fn zero_residual_branches<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for sb in &self.subs {
            sb.proj.zero(store);
            sb.mlp.fc2.zero(store);
        }
    }
}
