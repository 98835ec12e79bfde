//! The dual-task network: shared encoder, generation and classification
//! decoders coupled by interactive attention, task heads, and the patch
//! discriminator used by the adversarial term.

mod checkpoint;
mod config;
mod gradnorm;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, Task};
pub use gradnorm::{gradnorm_update, renormalize, GradNormOutcome, TaskWeights};
pub use loss::{
    adversarial_loss, classification_loss, compute_losses, discriminator_loss, generation_loss, l1_loss, total_loss,
    Losses,
};

use crate::attention::{AttentionMap, ForwardStats, Stream, SwinBlock};
use crate::error::{Error, Result};
use crate::interactive::InteractiveDecoderBlock;
use crate::nn::{Bound, Init, Linear, ParamId, ParamStore};
use crate::patch::{patch_expand, patch_merge, patch_partition, patch_reassemble, TokenGrid};
use crate::scalar::Scalar;
use crate::tensor::{numel, Graph, Tensor, Var};

/// Encoder grids: `levels[l]` for `l < stages` is the transformer output at
/// level `l` (the skip feature), `levels[stages]` is the bottleneck.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub levels: Vec<TokenGrid>,
}

impl EncoderFeatures {
    pub fn bottleneck(&self) -> &TokenGrid {
        self.levels.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Linear,
    pub blocks: Vec<SwinBlock>,
    /// Channel reduction `[C·prod(f), 2C]` of each merge.
    pub merges: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub enum DecoderBlocks {
    Interactive(Vec<InteractiveDecoderBlock>),
    /// Independent self-attention decoders, `[gen, cls]` per level.
    Independent(Vec<[SwinBlock; 2]>),
}

#[derive(Clone, Debug)]
pub struct Decoders {
    /// Expansion weights `[2C, 4C]` per level, `[gen, cls]`.
    pub expands: Vec<[ParamId; 2]>,
    pub blocks: DecoderBlocks,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub embed: Linear,
    pub block: SwinBlock,
    pub head: Linear,
}

/// Everything one forward pass of the generator produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Predicted follow-up scan, same shape as the input.
    pub scan: Var,
    /// Class probabilities `[B, num_classes]`.
    pub probs: Var,
    pub features: EncoderFeatures,
    /// Shared attention maps per decoder level (regular, shifted); empty
    /// without interactive attention.
    pub shared_attention: Vec<(AttentionMap, AttentionMap)>,
}

/// Network architecture plus generator and discriminator parameters.
#[derive(Clone, Debug)]
pub struct DualTaskModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub disc_params: ParamStore<T>,
    pub encoder: Encoder,
    pub decoders: Decoders,
    pub gen_head: Linear,
    pub cls_head: Linear,
    pub disc: Discriminator,
}

impl<T: Scalar> DualTaskModel<T> {
    /// Builds the architecture and draws initial parameters from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed, cfg.init_std);
        let mut params = ParamStore::new();
        let grids = cfg.level_grids()?;
        let f = numel(&cfg.merge_factors);

        let embed = Linear::embedding(&mut params, &mut init, "enc.embed", cfg.patch_volume(), cfg.base_channels)?;
        let mut blocks = Vec::with_capacity(cfg.stages);
        let mut merges = Vec::with_capacity(cfg.stages);
        for (l, grid) in grids.iter().enumerate().take(cfg.stages) {
            let bc = cfg.block_config(l);
            blocks.push(SwinBlock::new(&mut params, &mut init, &format!("enc.l{l}"), &bc, &grid.axes)?);
            let c = grid.channels;
            merges.push(params.add(format!("enc.l{l}.merge"), init.trunc_normal(&[c * f, 2 * c]))?);
        }
        let encoder = Encoder { embed, blocks, merges };

        let mut expands = Vec::with_capacity(cfg.stages);
        for (l, grid) in grids.iter().enumerate().take(cfg.stages) {
            let c = 2 * grid.channels;
            expands.push([
                params.add(format!("dec.gen.l{l}.expand"), init.trunc_normal(&[c, 2 * c]))?,
                params.add(format!("dec.cls.l{l}.expand"), init.trunc_normal(&[c, 2 * c]))?,
            ]);
        }
        let blocks = if cfg.interactive {
            let r = cfg.reference_task;
            let mut v = Vec::with_capacity(cfg.stages);
            for (l, grid) in grids.iter().enumerate().take(cfg.stages) {
                v.push(InteractiveDecoderBlock::new(
                    &mut params,
                    &mut init,
                    &format!("dec.l{l}"),
                    [r.as_str(), r.other().as_str()],
                    [r.stream(), r.other().stream()],
                    &cfg.block_config(l),
                    &grid.axes,
                )?);
            }
            DecoderBlocks::Interactive(v)
        } else {
            let mut v = Vec::with_capacity(cfg.stages);
            for (l, grid) in grids.iter().enumerate().take(cfg.stages) {
                let bc = cfg.block_config(l);
                v.push([
                    SwinBlock::new(&mut params, &mut init, &format!("dec.gen.l{l}"), &bc, &grid.axes)?,
                    SwinBlock::new(&mut params, &mut init, &format!("dec.cls.l{l}"), &bc, &grid.axes)?,
                ]);
            }
            DecoderBlocks::Independent(v)
        };
        let decoders = Decoders { expands, blocks };
        let c0 = cfg.base_channels;
        let gen_head = Linear::new(&mut params, &mut init, "head.gen", c0, cfg.patch_volume(), true)?;
        let cls_head = Linear::new(&mut params, &mut init, "head.cls", c0, cfg.num_classes, true)?;

        let mut disc_params = ParamStore::new();
        let dp = numel(&cfg.disc_patch) * cfg.in_channels;
        let dc = cfg.disc_channels;
        let dgrid = cfg.disc_grid();
        let disc = Discriminator {
            embed: Linear::embedding(&mut disc_params, &mut init, "disc.embed", dp, dc)?,
            block: SwinBlock::new(&mut disc_params, &mut init, "disc.block", &cfg.disc_block_config(), &dgrid.axes)?,
            head: Linear::new(&mut disc_params, &mut init, "disc.head", dc, 1, true)?,
        };
        Ok(DualTaskModel { cfg, params, disc_params, encoder, decoders, gen_head, cls_head, disc })
    }

    /// Parameter used to measure per-task gradient norms: the channel
    /// reduction of the last encoder merge.
    pub fn shared_last_layer(&self) -> ParamId {
        *self.encoder.merges.last().unwrap()
    }

    /// Volume batch `[B, spatial..]` (single channel) or `[B, spatial.., C]`.
    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let d = self.cfg.ndim();
        let ok = (s.len() == d + 1 && self.cfg.in_channels == 1 && s[1..] == self.cfg.input[..])
            || (s.len() == d + 2 && s[1..=d] == self.cfg.input[..] && s[d + 1] == self.cfg.in_channels);
        if !ok {
            return Err(Error::shape(format!(
                "input {s:?} does not match configured extents {:?} with {} channel(s)",
                self.cfg.input, self.cfg.in_channels
            )));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, x: Var, stats: &mut ForwardStats) -> Result<EncoderFeatures> {
        self.check_input(g, x)?;
        let raw = patch_partition(g, x, &self.cfg.patch)?;
        let t = self.encoder.embed.forward(g, p, raw.tokens)?;
        let mut cur = TokenGrid::new(g, t, self.cfg.level0_grid(), 0)?;
        let mut levels = Vec::with_capacity(self.cfg.stages + 1);
        for (block, &merge) in self.encoder.blocks.iter().zip(&self.encoder.merges) {
            let (out, _, _) = block.forward(g, p, &cur, Stream::Encoder, stats)?;
            cur = patch_merge(g, &out, &self.cfg.merge_factors, p.var(merge))?;
            levels.push(out);
        }
        levels.push(cur);
        Ok(EncoderFeatures { levels })
    }

    /// Runs both decoders from the bottleneck. Returns level-0 grids
    /// `[gen, cls]` and the shared attention maps, deepest level first.
    #[allow(clippy::type_complexity)]
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feats: &EncoderFeatures,
        stats: &mut ForwardStats,
    ) -> Result<([TokenGrid; 2], Vec<(AttentionMap, AttentionMap)>)> {
        if feats.levels.len() != self.cfg.stages + 1 {
            return Err(Error::shape(format!(
                "{} encoder levels for a {}-stage decoder",
                feats.levels.len(),
                self.cfg.stages
            )));
        }
        let bottom = feats.bottleneck();
        let mut streams = [bottom.clone(), bottom.clone()];
        let mut shared = Vec::new();
        for l in (0..self.cfg.stages).rev() {
            for (i, s) in streams.iter_mut().enumerate() {
                *s = patch_expand(g, s, &self.cfg.merge_factors, p.var(self.decoders.expands[l][i]))?;
            }
            let skip = &feats.levels[l];
            if streams[0].shape != skip.shape {
                return Err(Error::shape(format!("decoder level {l}: {} vs encoder {}", streams[0].shape, skip.shape)));
            }
            match &self.decoders.blocks {
                DecoderBlocks::Interactive(blocks) => {
                    let r = self.cfg.reference_task.index();
                    let f = 1 - r;
                    let out = blocks[l].forward(g, p, skip, &streams[r], &streams[f], stats)?;
                    streams[r] = out.reference;
                    streams[f] = out.follower;
                    shared.push((out.a_regular, out.a_shifted));
                }
                DecoderBlocks::Independent(blocks) => {
                    for (i, task) in [Stream::Generation, Stream::Classification].into_iter().enumerate() {
                        streams[i] = blocks[l][i].forward(g, p, &streams[i], task, stats)?.0;
                    }
                }
            }
        }
        Ok((streams, shared))
    }

    /// Token-wise linear map to patch voxels, then reassembly to full resolution.
    pub fn generation_head(&self, g: &mut Graph<T>, p: &Bound, grid: &TokenGrid) -> Result<Var> {
        let t = self.gen_head.forward(g, p, grid.tokens)?;
        let shape = crate::patch::GridShape { axes: grid.shape.axes.clone(), channels: self.cfg.patch_volume() };
        let voxels = TokenGrid::new(g, t, shape, grid.level)?;
        patch_reassemble(g, &voxels, &self.cfg.patch, self.cfg.in_channels)
    }

    /// Mean over tokens, linear, softmax: `[B, num_classes]`.
    pub fn classification_head(&self, g: &mut Graph<T>, p: &Bound, grid: &TokenGrid) -> Result<Var> {
        let pooled = g.mean_axis(grid.tokens, 1)?;
        let logits = self.cls_head.forward(g, p, pooled)?;
        g.softmax(logits, 1)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, stats: &mut ForwardStats) -> Result<ForwardOutput> {
        let features = self.encode(g, p, x, stats)?;
        let ([gen, cls], shared_attention) = self.decode(g, p, &features, stats)?;
        let scan = self.generation_head(g, p, &gen)?;
        let probs = self.classification_head(g, p, &cls)?;
        Ok(ForwardOutput { scan, probs, features, shared_attention })
    }

    /// Realness logits `[B]` for scans shaped like the input.
    pub fn discriminate(&self, g: &mut Graph<T>, p: &Bound, scan: Var, stats: &mut ForwardStats) -> Result<Var> {
        self.check_input(g, scan)?;
        let raw = patch_partition(g, scan, &self.cfg.disc_patch)?;
        let t = self.disc.embed.forward(g, p, raw.tokens)?;
        let grid = TokenGrid::new(g, t, self.cfg.disc_grid(), 0)?;
        let (out, _, _) = self.disc.block.forward(g, p, &grid, Stream::Discriminator, stats)?;
        let pooled = g.mean_axis(out.tokens, 1)?;
        let logit = self.disc.head.forward(g, p, pooled)?;
        let b = g.shape(logit)[0];
        g.reshape(logit, vec![b])
    }

    /// Inference without a tape for parameters: returns the predicted scan
    /// clamped to `[0, 1]` and the class probabilities.
    pub fn predict(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv, &mut ForwardStats::default())?;
        let scan = g.value(out.scan).map(|v| v.max(T::zero()).min(T::one()));
        Ok((scan, g.value(out.probs).clone()))
    }

    /// Zeroes the residual branches of every decoder block.
    pub fn zero_decoder_residuals(&mut self) {
        match &self.decoders.blocks {
            DecoderBlocks::Interactive(blocks) => {
                for b in blocks {
                    b.zero_residual_branches(&mut self.params);
                }
            }
            DecoderBlocks::Independent(blocks) => {
                for pair in blocks {
                    for b in pair {
                        b.zero_residual_branches(&mut self.params);
                    }
                }
            }
        }
    }
}
