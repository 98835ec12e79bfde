//! Cross-task attention: queries and keys come from the encoder skip
//! feature, values from each decoder stream. The attention map is computed
//! once by the reference stream and handed to the follower unchanged.

use crate::attention::{
    apply_attention, attention_weights, check_heads, mask_var, project_qk, split_heads, AttentionMap, ForwardStats,
    QkSite, RelativePositionBias, ScaleMode, Stream, TransformerBlockConfig,
};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::patch::{window_partition, window_reverse, TokenGrid, WindowLayout};
use crate::scalar::Scalar;
use crate::tensor::Graph;

/// Query/key side of interactive attention. Owned by the reference stream.
#[derive(Clone, Debug)]
pub struct ReferenceAttention {
    pub norm_sa: LayerNorm,
    pub qk: Linear,
    pub bias: RelativePositionBias,
    pub heads: usize,
    pub channels: usize,
}

impl ReferenceAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &TransformerBlockConfig,
        window: &[usize],
    ) -> Result<Self> {
        check_heads(cfg.channels, cfg.heads)?;
        Ok(ReferenceAttention {
            norm_sa: LayerNorm::new(store, &format!("{name}.norm_sa"), cfg.channels, cfg.ln_eps)?,
            qk: Linear::new(store, init, &format!("{name}.qk"), cfg.channels, 2 * cfg.channels, true)?,
            bias: RelativePositionBias::new(store, name, window, cfg.heads)?,
            heads: cfg.heads,
            channels: cfg.channels,
        })
    }
}

/// Per-task parameters of one interactive sub-block. The value projection
/// has no bias, so attention output is linear in the stream input.
#[derive(Clone, Debug)]
pub struct DecoderStream {
    pub norm1: LayerNorm,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderStream {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &TransformerBlockConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(DecoderStream {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, cfg.ln_eps)?,
            v: Linear::new(store, init, &format!("{name}.v"), c, c, false)?,
            proj: Linear::new(store, init, &format!("{name}.proj"), c, c, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, cfg.ln_eps)?,
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), c, cfg.mlp_ratio * c)?,
        })
    }

    fn zero_residual_branches<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.proj.zero(store);
        self.mlp.fc2.zero(store);
    }
}

fn check_pair(a: &TokenGrid, b: &TokenGrid, what: &str) -> Result<()> {
    if a.shape != b.shape || a.batch != b.batch {
        return Err(Error::shape(format!(
            "{what}: grids {} (batch {}) and {} (batch {}) differ",
            a.shape, a.batch, b.shape, b.batch
        )));
    }
    Ok(())
}

/// Reference branch: `A = softmax(q(x_sa) k(x_sa)ᵀ · scale + B + mask)`,
/// output `A · v(x_g)` with heads concatenated, reversed back onto the grid.
/// No normalization is applied here; callers pass normalized grids.
#[allow(clippy::too_many_arguments)]
pub fn interactive_attention_reference<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x_sa: &TokenGrid,
    x_g: &TokenGrid,
    reference: &ReferenceAttention,
    v: &Linear,
    layout: &WindowLayout,
    scale: ScaleMode,
    stream: Stream,
    stats: &mut ForwardStats,
) -> Result<(TokenGrid, AttentionMap)> {
    check_pair(x_sa, x_g, "interactive attention")?;
    if x_sa.shape.channels != reference.channels {
        return Err(Error::shape(format!("grid {} vs {} attention channels", x_sa.shape, reference.channels)));
    }
    let ws = window_partition(g, x_sa, layout)?;
    let site = QkSite { stream, level: x_sa.level, shifted: layout.is_shifted() };
    let (q, k) = project_qk(g, p, &reference.qk, ws, reference.heads, site, stats)?;
    let bias = reference.bias.forward(g, p)?;
    let mask = mask_var(g, layout);
    let a = attention_weights(
        g,
        q,
        k,
        Some(bias),
        mask,
        scale.factor(reference.channels, reference.heads),
        layout.num_windows(),
    )?;
    stats.attention_produced.push(a.values);
    let out = mix_values(g, p, &a, x_g, v, layout)?;
    Ok((out, a))
}

/// Follower branch: `A · v(x_c)` with the reference's attention map.
/// Evaluates no query/key projection.
pub fn interactive_attention_follower<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    a: &AttentionMap,
    x_c: &TokenGrid,
    v: &Linear,
    layout: &WindowLayout,
    stats: &mut ForwardStats,
) -> Result<TokenGrid> {
    if a.batch != x_c.batch || a.windows != layout.num_windows() || a.tokens != layout.window_tokens() {
        return Err(Error::shape(format!(
            "attention map for {} x {} windows of {} tokens cannot serve grid {} (batch {}) with {} x {} windows",
            a.batch,
            a.windows,
            a.tokens,
            x_c.shape,
            x_c.batch,
            x_c.batch,
            layout.num_windows()
        )));
    }
    stats.attention_consumed.push(a.values);
    mix_values(g, p, a, x_c, v, layout)
}

fn mix_values<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    a: &AttentionMap,
    x: &TokenGrid,
    v: &Linear,
    layout: &WindowLayout,
) -> Result<TokenGrid> {
    let xv = v.forward(g, p, x.tokens)?;
    let wv = window_partition(g, &x.with_tokens(xv), layout)?;
    let vh = split_heads(g, wv, a.heads)?;
    let o = apply_attention(g, a, vh)?;
    window_reverse(g, o, layout, &x.shape, x.level)
}

#[derive(Clone, Debug)]
pub struct InteractiveSubBlock {
    pub layout: WindowLayout,
    pub reference: ReferenceAttention,
    /// Reference stream first, follower second.
    pub streams: [DecoderStream; 2],
}

/// Decoder block for both task streams: regular then shifted sub-block, each
/// `x += proj(A · v(LN(x))); x += MLP(LN(x))` per stream, with `A` built
/// from the encoder skip in the reference stream and shared with the follower.
#[derive(Clone, Debug)]
pub struct InteractiveDecoderBlock {
    pub cfg: TransformerBlockConfig,
    pub reference_stream: Stream,
    pub follower_stream: Stream,
    pub subs: [InteractiveSubBlock; 2],
}

/// Output of one interactive decoder block.
#[derive(Clone, Debug)]
pub struct InteractiveOutput {
    pub reference: TokenGrid,
    pub follower: TokenGrid,
    pub a_regular: AttentionMap,
    pub a_shifted: AttentionMap,
}

impl InteractiveDecoderBlock {
    /// `names` are the parameter prefixes of the reference and follower streams.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        names: [&str; 2],
        streams: [Stream; 2],
        cfg: &TransformerBlockConfig,
        axes: &[usize],
    ) -> Result<Self> {
        check_heads(cfg.channels, cfg.heads)?;
        let mut subs = Vec::with_capacity(2);
        for (tag, shifted) in [("wmsa", false), ("swmsa", true)] {
            let layout = WindowLayout::for_grid(axes, &cfg.window, shifted)?;
            subs.push(InteractiveSubBlock {
                reference: ReferenceAttention::new(store, init, &format!("{name}.{tag}.ref"), cfg, &layout.window)?,
                streams: [
                    DecoderStream::new(store, init, &format!("{name}.{tag}.{}", names[0]), cfg)?,
                    DecoderStream::new(store, init, &format!("{name}.{tag}.{}", names[1]), cfg)?,
                ],
                layout,
            });
        }
        let shifted = subs.pop().unwrap();
        let regular = subs.pop().unwrap();
        Ok(InteractiveDecoderBlock {
            cfg: cfg.clone(),
            reference_stream: streams[0],
            follower_stream: streams[1],
            subs: [regular, shifted],
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_sa: &TokenGrid,
        x_ref: &TokenGrid,
        x_fol: &TokenGrid,
        stats: &mut ForwardStats,
    ) -> Result<InteractiveOutput> {
        check_pair(x_sa, x_ref, "reference stream")?;
        check_pair(x_sa, x_fol, "follower stream")?;
        if x_sa.shape.axes != self.subs[0].layout.axes || x_sa.shape.channels != self.cfg.channels {
            return Err(Error::shape(format!(
                "block for {:?}x{} applied to grid {}",
                self.subs[0].layout.axes, self.cfg.channels, x_sa.shape
            )));
        }
        let (mut r, mut f) = (x_ref.clone(), x_fol.clone());
        let mut maps = Vec::with_capacity(2);
        for sb in &self.subs {
            let sa = sb.reference.norm_sa.forward(g, p, x_sa.tokens)?;
            let [rs, fs] = &sb.streams;
            let hr = rs.norm1.forward(g, p, r.tokens)?;
            let (out_r, a) = interactive_attention_reference(
                g,
                p,
                &x_sa.with_tokens(sa),
                &r.with_tokens(hr),
                &sb.reference,
                &rs.v,
                &sb.layout,
                self.cfg.scale,
                self.reference_stream,
                stats,
            )?;
            let hf = fs.norm1.forward(g, p, f.tokens)?;
            let out_f = interactive_attention_follower(g, p, &a, &f.with_tokens(hf), &fs.v, &sb.layout, stats)?;
            r = self.finish(g, p, rs, &r, out_r, stats)?;
            f = self.finish(g, p, fs, &f, out_f, stats)?;
            maps.push(a);
        }
        let a_shifted = maps.pop().unwrap();
        let a_regular = maps.pop().unwrap();
        Ok(InteractiveOutput { reference: r, follower: f, a_regular, a_shifted })
    }

    fn finish<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        s: &DecoderStream,
        x: &TokenGrid,
        attn: TokenGrid,
        stats: &mut ForwardStats,
    ) -> Result<TokenGrid> {
        let o = s.proj.forward(g, p, attn.tokens)?;
        let o = stats.dropout(g, o, self.cfg.drop_rate)?;
        let t = g.add(x.tokens, o)?;
        let n = s.norm2.forward(g, p, t)?;
        let m = s.mlp.forward(g, p, n)?;
        let m = stats.dropout(g, m, self.cfg.drop_rate)?;
        let t = g.add(t, m)?;
        Ok(x.with_tokens(t))
    }

    pub fn zero_residual_branches<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for sb in &self.subs {
            for s in &sb.streams {
                s.zero_residual_branches(store);
            }
        }
    }
}
