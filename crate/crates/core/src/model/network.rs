//! Encoder, context bridge, decoder and segmentation head.

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, STAGES};
use crate::nn::{
    AttentionParams, LayerNorm, Linear, MixFfn, OverlapPatchEmbed, ParamInit, PatchExpand,
    PatchMerge, ReductionMode, TokenGrid, TransformerBlock,
};
use crate::params::impl_module;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Multi-scale encoder features `F1..F4`, each `[N, h_i·w_i, C_i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: Vec<TokenGrid>,
}

impl FeaturePyramid {
    /// Copies every level out of the graph.
    pub fn to_tensors<T: Scalar>(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.levels.iter().map(|l| g.tensor(l.tokens)).collect()
    }

    /// Records externally built level tensors on `g`.
    pub fn from_tensors<T: Scalar>(g: &mut Graph<T>, levels: &[Tensor<T>], grids: &[(usize, usize)]) -> Result<Self> {
        if levels.len() != grids.len() {
            return Err(Error::shape("feature_pyramid", "one grid size per level required"));
        }
        let levels = levels
            .iter()
            .zip(grids)
            .map(|(t, &(h, w))| {
                if t.shape().len() != 3 || t.shape()[1] != h * w {
                    return Err(Error::shape(
                        "feature_pyramid",
                        format!("level {:?} does not tile {h}x{w}", t.shape()),
                    ));
                }
                Ok(TokenGrid { tokens: g.leaf(t)?, h, w })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }
}

fn run_blocks<T: Scalar>(g: &mut Graph<T>, blocks: &[TransformerBlock<T>], x: TokenGrid) -> Result<TokenGrid> {
    let mut tokens = x.tokens;
    for b in blocks {
        tokens = b.forward(g, tokens, x.h, x.w)?;
    }
    Ok(TokenGrid { tokens, ..x })
}

fn make_blocks<T: Scalar>(init: &mut ParamInit, cfg: &ModelConfig, stage: usize) -> Result<Vec<TransformerBlock<T>>> {
    (0..cfg.depths[stage])
        .map(|_| {
            TransformerBlock::new(
                init,
                cfg.embed_dims[stage],
                cfg.heads[stage],
                cfg.sr_ratios[stage],
                cfg.ffn_expansion,
            )
        })
        .collect()
}

// ------------------------------------------------------------------ encoder

#[derive(Debug, Clone)]
pub struct EncoderStage<T: Scalar> {
    pub merge: Option<PatchMerge<T>>,
    pub blocks: Vec<TransformerBlock<T>>,
}

impl_module!(EncoderStage { merge, blocks });

/// Four-stage hierarchical encoder. Stage 1 embeds overlapping 7×7
/// patches at stride 4; later stages halve the grid with a patch merge.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub embed: OverlapPatchEmbed<T>,
    pub stages: Vec<EncoderStage<T>>,
}

impl_module!(Encoder { embed, stages });

impl<T: Scalar> Encoder<T> {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let embed = OverlapPatchEmbed::default_geometry(init, cfg.in_channels, cfg.embed_dims[0])?;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let merge = if i == 0 {
                None
            } else {
                Some(PatchMerge::new(init, cfg.embed_dims[i - 1], cfg.embed_dims[i])?)
            };
            stages.push(EncoderStage {
                merge,
                blocks: make_blocks(init, cfg, i)?,
            });
        }
        Ok(Encoder { embed, stages })
    }

    pub fn forward(&self, g: &mut Graph<T>, img: Var) -> Result<FeaturePyramid> {
        let mut levels = Vec::with_capacity(STAGES);
        let mut x = self.embed.forward(g, img)?;
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = m.forward(g, x)?;
            }
            x = run_blocks(g, &stage.blocks, x)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

// ------------------------------------------------------------------ bridge

/// Transformer block over the concatenated multi-scale sequence.
///
/// Attention (and its layer norms) runs over the whole mixed sequence at
/// width `C1`; the feed-forward step splits the sequence back into levels,
/// restores each level's native `[h_i·w_i, C_i]` layout, and applies a
/// per-level mix feed-forward network so its depthwise convolution sees
/// the level's real spatial map.
#[derive(Debug, Clone)]
pub struct BridgeBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: AttentionParams<T>,
    pub norm2: LayerNorm<T>,
    pub ffns: Vec<MixFfn<T>>,
}

impl_module!(BridgeBlock {
    norm1,
    attn,
    norm2,
    ffns
});

/// Bookkeeping to move between the pyramid and the bridge sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeLayout {
    /// Per level: (grid h, grid w, channels C_i, segment length).
    pub levels: Vec<(usize, usize, usize, usize)>,
    pub width: usize,
}

impl BridgeLayout {
    pub fn segment_lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.3).collect()
    }

    pub fn total_len(&self) -> usize {
        self.levels.iter().map(|l| l.3).sum()
    }
}

impl<T: Scalar> BridgeBlock<T> {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let c1 = cfg.embed_dims[0];
        Ok(BridgeBlock {
            norm1: LayerNorm::new(init, c1),
            attn: AttentionParams::new(init, c1, cfg.heads[0], cfg.bridge_ratio, ReductionMode::Sequence)?,
            norm2: LayerNorm::new(init, c1),
            ffns: cfg
                .embed_dims
                .iter()
                .map(|&c| MixFfn::new(init, c, cfg.ffn_expansion))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, layout: &BridgeLayout) -> Result<Var> {
        let n = g.shape(x)[0];
        let a_in = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, a_in, None)?;
        let x1 = g.add(x, a)?;
        let t = self.norm2.forward(g, x1)?;
        let parts = g.split(t, 1, &layout.segment_lengths())?;
        let mut outs = Vec::with_capacity(parts.len());
        for ((&p, &(h, w, c, len)), ffn) in parts.iter().zip(&layout.levels).zip(&self.ffns) {
            let native = g.reshape(p, &[n, h * w, c])?;
            let y = ffn.forward(g, native, h, w)?;
            outs.push(g.reshape(y, &[n, len, layout.width])?);
        }
        let f = g.concat(&outs, 1)?;
        g.add(x1, f)
    }
}

/// Context bridge: flatten every level to width `C1`, concatenate along
/// the token axis, run `d` bridge blocks, split and restore.
#[derive(Debug, Clone)]
pub struct Bridge<T: Scalar> {
    pub blocks: Vec<BridgeBlock<T>>,
}

impl_module!(Bridge { blocks });

impl<T: Scalar> Bridge<T> {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        Ok(Bridge {
            blocks: (0..cfg.bridge_depth)
                .map(|_| BridgeBlock::new(init, cfg))
                .collect::<Result<_>>()?,
        })
    }

    /// Layout of the bridge sequence for `p`, re-viewing each level at
    /// width `width`.
    pub fn layout(g: &Graph<T>, p: &FeaturePyramid, width: usize) -> Result<BridgeLayout> {
        let levels = p
            .levels
            .iter()
            .map(|l| {
                let s = g.shape(l.tokens);
                let c = s[2];
                if c % width != 0 {
                    return Err(Error::Config(format!(
                        "bridge: level width {c} not divisible by the stage-1 width {width}"
                    )));
                }
                Ok((l.h, l.w, c, s[1] * c / width))
            })
            .collect::<Result<_>>()?;
        Ok(BridgeLayout { levels, width })
    }

    /// Flattens and concatenates the pyramid into `[N, Σ L_i·C_i/C1, C1]`.
    pub fn flatten(g: &mut Graph<T>, p: &FeaturePyramid) -> Result<(Var, BridgeLayout)> {
        let width = p
            .levels
            .first()
            .map(|l| g.shape(l.tokens)[2])
            .ok_or_else(|| Error::shape("bridge", "empty pyramid"))?;
        let layout = Self::layout(g, p, width)?;
        let n = g.shape(p.levels[0].tokens)[0];
        let segs = p
            .levels
            .iter()
            .zip(&layout.levels)
            .map(|(l, &(_, _, _, len))| g.reshape(l.tokens, &[n, len, width]))
            .collect::<Result<Vec<_>>>()?;
        Ok((g.concat(&segs, 1)?, layout))
    }

    /// Inverse of [`Bridge::flatten`].
    pub fn restore(g: &mut Graph<T>, seq: Var, layout: &BridgeLayout) -> Result<FeaturePyramid> {
        let n = g.shape(seq)[0];
        let parts = g.split(seq, 1, &layout.segment_lengths())?;
        let levels = parts
            .into_iter()
            .zip(&layout.levels)
            .map(|(p, &(h, w, c, _))| {
                Ok(TokenGrid {
                    tokens: g.reshape(p, &[n, h * w, c])?,
                    h,
                    w,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { levels })
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &FeaturePyramid) -> Result<FeaturePyramid> {
        let (mut seq, layout) = Self::flatten(g, p)?;
        if let Some(first) = self.blocks.first() {
            if layout.width != first.attn.dim() {
                return Err(Error::shape(
                    "bridge",
                    format!("sequence width {} against block width {}", layout.width, first.attn.dim()),
                ));
            }
        }
        for b in &self.blocks {
            seq = b.forward(g, seq, &layout)?;
        }
        Self::restore(g, seq, &layout)
    }
}

// ------------------------------------------------------------------ decoder

/// One decoder stage: ×2 patch expansion of the coarser level, skip fusion
/// (channel concatenation + linear), then transformer blocks.
#[derive(Debug, Clone)]
pub struct DecoderStage<T: Scalar> {
    pub expand: PatchExpand<T>,
    pub fuse: Linear<T>,
    pub blocks: Vec<TransformerBlock<T>>,
}

impl_module!(DecoderStage {
    expand,
    fuse,
    blocks
});

#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    /// Stages for levels 3, 2, 1, in execution order.
    pub stages: Vec<DecoderStage<T>>,
    pub final_expand: PatchExpand<T>,
    pub head: Linear<T>,
}

impl_module!(Decoder {
    stages,
    final_expand,
    head
});

impl<T: Scalar> Decoder<T> {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(STAGES - 1);
        for i in (0..STAGES - 1).rev() {
            let expand = PatchExpand::new(init, cfg.embed_dims[i + 1], 2)?;
            let fused_in = expand.out_dim() + cfg.embed_dims[i];
            stages.push(DecoderStage {
                expand,
                fuse: Linear::new(init, fused_in, cfg.embed_dims[i], true),
                blocks: make_blocks(init, cfg, i)?,
            });
        }
        let c1 = cfg.embed_dims[0];
        Ok(Decoder {
            stages,
            final_expand: PatchExpand::new(init, c1, 4)?,
            head: Linear::new(init, c1, cfg.num_classes, true),
        })
    }

    /// Decodes to logits `[N, num_classes, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &FeaturePyramid) -> Result<Var> {
        if p.levels.len() != STAGES {
            return Err(Error::shape(
                "decode",
                format!("pyramid has {} levels, expected {STAGES}", p.levels.len()),
            ));
        }
        let mut x = p.levels[STAGES - 1];
        for (stage, skip) in self.stages.iter().zip(p.levels[..STAGES - 1].iter().rev()) {
            let up = stage.expand.forward(g, x)?;
            if (up.h, up.w) != (skip.h, skip.w) {
                return Err(Error::shape(
                    "decode",
                    format!("expanded grid {}x{} against skip grid {}x{}", up.h, up.w, skip.h, skip.w),
                ));
            }
            let cat = g.concat(&[up.tokens, skip.tokens], 2)?;
            let fused = stage.fuse.forward(g, cat)?;
            x = run_blocks(g, &stage.blocks, TokenGrid { tokens: fused, ..up })?;
        }
        let full = self.final_expand.forward(g, x)?;
        let logits = self.head.forward(g, full.tokens)?;
        let n = g.shape(logits)[0];
        let k = self.head.out_dim();
        let logits = g.reshape(logits, &[n, full.h, full.w, k])?;
        g.permute(logits, &[0, 3, 1, 2])
    }
}

// ------------------------------------------------------------------ full model

/// Per-channel (mean, std) used to standardize RGB inputs (the usual
/// natural-image statistics).
pub const INPUT_STATS: [(f64, f64); 3] = [(0.485, 0.229), (0.456, 0.224), (0.406, 0.225)];
/// Statistics for channels beyond the third.
pub const INPUT_STATS_OTHER: (f64, f64) = (0.45, 0.225);

/// The complete U-shaped segmentation network.
#[derive(Debug, Clone)]
pub struct SegModel<T: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub bridge: Bridge<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> crate::params::Module<T> for SegModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        use crate::params::join;
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.bridge.visit_params(&join(prefix, "bridge"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        use crate::params::join;
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.bridge.visit_params_mut(&join(prefix, "bridge"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}

impl<T: Scalar> SegModel<T> {
    /// Builds a model with freshly initialized parameters, reproducible
    /// from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = ParamInit::new(seed);
        let encoder = Encoder::new(&mut init, config)?;
        let bridge = Bridge::new(&mut init, config)?;
        let decoder = Decoder::new(&mut init, config)?;
        Ok(SegModel {
            config: config.clone(),
            encoder,
            bridge,
            decoder,
        })
    }

    fn check_image(&self, g: &Graph<T>, img: Var) -> Result<()> {
        let s = g.shape(img);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::shape(
                "forward",
                format!(
                    "image {s:?}, model expects [N, {}, {}, {}]",
                    c.in_channels, c.image_size, c.image_size
                ),
            ));
        }
        Ok(())
    }

    /// Fixed per-channel standardization of `[0, 1]` inputs.
    ///
    /// Without it every pixel is positive, the first convolution responds
    /// mostly along one brightness-scaled direction, and the layer norm
    /// right after it divides that brightness out again.
    pub fn standardize(&self, g: &mut Graph<T>, img: Var) -> Result<Var> {
        let s = g.shape(img).to_vec();
        let plane = s[2] * s[3];
        let (mut scale, mut shift) = (Vec::new(), Vec::new());
        for _ in 0..s[0] {
            for c in 0..s[1] {
                let (m, sd) = INPUT_STATS.get(c).copied().unwrap_or(INPUT_STATS_OTHER);
                scale.extend(std::iter::repeat_n(T::c(1.0 / sd), plane));
                shift.extend(std::iter::repeat_n(T::c(-m / sd), plane));
            }
        }
        let a = g.constant(&s, scale)?;
        let b = g.constant(&s, shift)?;
        let y = g.mul(img, a)?;
        g.add(y, b)
    }

    pub fn encode(&self, g: &mut Graph<T>, img: Var) -> Result<FeaturePyramid> {
        self.check_image(g, img)?;
        let x = self.standardize(g, img)?;
        self.encoder.forward(g, x)
    }

    pub fn bridge(&self, g: &mut Graph<T>, p: &FeaturePyramid) -> Result<FeaturePyramid> {
        self.bridge.forward(g, p)
    }

    pub fn decode(&self, g: &mut Graph<T>, p: &FeaturePyramid) -> Result<Var> {
        self.decoder.forward(g, p)
    }

    /// `decode(bridge(encode(img)))`, logits `[N, num_classes, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, img: Var) -> Result<Var> {
        let enc = self.encode(g, img)?;
        let bridged = self.bridge(g, &enc)?;
        if self.config.skips_from_encoder {
            // Deepest level from the bridge, skips from the raw encoder.
            let mut mixed = enc.clone();
            mixed.levels[STAGES - 1] = bridged.levels[STAGES - 1];
            self.decode(g, &mixed)
        } else {
            self.decode(g, &bridged)
        }
    }

    /// Convenience: logits for an image batch tensor, no gradients kept.
    pub fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.shape(), images.data().to_vec())?;
        let y = self.forward(&mut g, x)?;
        Ok(g.tensor(y))
    }

    /// Parameter-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        let mut out = SegModel::<U>::init(&self.config, 0).expect("config already validated");
        let mut src = Vec::new();
        crate::params::Module::visit_params(self, "", &mut |_, t| src.push(t.cast::<U>()));
        let mut it = src.into_iter();
        crate::params::Module::visit_params_mut(&mut out, "", &mut |_, t| {
            *t = it.next().expect("same structure").with_grad();
        });
        out
    }
}
