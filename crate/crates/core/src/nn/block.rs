use crate::error::Result;
use crate::nn::attention::{AttentionParams, ReductionMode};
use crate::nn::basic::{token_dims, LayerNorm};
use crate::nn::ffn::MixFfn;
use crate::nn::init::ParamInit;
use crate::params::impl_module;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Pre-norm transformer block: efficient self-attention followed by the
/// mix feed-forward network, each wrapped in a residual connection.
///
/// There is no positional encoding; location enters only through the
/// depthwise convolution inside the feed-forward network.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: AttentionParams<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: MixFfn<T>,
}

impl_module!(TransformerBlock {
    norm1,
    attn,
    norm2,
    ffn
});

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(
        init: &mut ParamInit,
        dim: usize,
        heads: usize,
        ratio: usize,
        expansion: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(init, dim),
            attn: AttentionParams::new(init, dim, heads, ratio, ReductionMode::Spatial)?,
            norm2: LayerNorm::new(init, dim),
            ffn: MixFfn::new(init, dim, expansion)?,
        })
    }

    /// `x₁ = x + attn(norm1(x))`, `y = x₁ + ffn(norm2(x₁))` on an `h×w` grid.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        token_dims(g, "transformer_block", x, h, w)?;
        let n1 = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, n1, Some((h, w)))?;
        let x1 = g.add(x, a)?;
        let n2 = self.norm2.forward(g, x1)?;
        let f = self.ffn.forward(g, n2, h, w)?;
        g.add(x1, f)
    }
}
