//! Multi-head self-attention whose keys and values come from a
//! spatially reduced copy of the token sequence.

use crate::error::{Error, Result};
use crate::nn::basic::{map_to_tokens, tokens_to_map, LayerNorm, Linear};
use crate::nn::init::ParamInit;
use crate::params::{join, Module};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, Tensor, Var};

/// How the key/value source is shortened before attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionMode {
    /// Tokens are a 2-D grid; an `r×r`, stride-`r` convolution shrinks
    /// it by `r²`.
    Spatial,
    /// Tokens are an arbitrary sequence; each run of `r` consecutive
    /// tokens is merged (a 1-D stride-`r` convolution), shrinking it by `r`.
    Sequence,
}

/// Parameters of efficient self-attention over channel width `C`.
///
/// Query, key and value projections carry no bias: a key bias adds the
/// same amount to every score of a query and is annihilated by the
/// softmax.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    /// `[C, C, r, r]` (spatial) or `[C, C, 1, r]` (sequence); absent when `r == 1`.
    pub reduce: Option<Tensor<T>>,
    pub reduce_bias: Option<Tensor<T>>,
    pub reduce_norm: Option<LayerNorm<T>>,
    pub heads: usize,
    pub ratio: usize,
    pub mode: ReductionMode,
}

impl<T: Scalar> Module<T> for AttentionParams<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.wq.visit_params(&join(prefix, "wq"), f);
        self.wk.visit_params(&join(prefix, "wk"), f);
        self.wv.visit_params(&join(prefix, "wv"), f);
        self.wo.visit_params(&join(prefix, "wo"), f);
        self.reduce.visit_params(&join(prefix, "reduce.weight"), f);
        self.reduce_bias.visit_params(&join(prefix, "reduce.bias"), f);
        self.reduce_norm.visit_params(&join(prefix, "reduce_norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.wq.visit_params_mut(&join(prefix, "wq"), f);
        self.wk.visit_params_mut(&join(prefix, "wk"), f);
        self.wv.visit_params_mut(&join(prefix, "wv"), f);
        self.wo.visit_params_mut(&join(prefix, "wo"), f);
        self.reduce.visit_params_mut(&join(prefix, "reduce.weight"), f);
        self.reduce_bias.visit_params_mut(&join(prefix, "reduce.bias"), f);
        self.reduce_norm.visit_params_mut(&join(prefix, "reduce_norm"), f);
    }
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(
        init: &mut ParamInit,
        dim: usize,
        heads: usize,
        ratio: usize,
        mode: ReductionMode,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        if ratio == 0 {
            return Err(Error::Config("attention reduction ratio must be >= 1".into()));
        }
        let wq = Linear::new(init, dim, dim, false);
        let wk = Linear::new(init, dim, dim, false);
        let wv = Linear::new(init, dim, dim, false);
        let wo = Linear::new(init, dim, dim, true);
        let (reduce, reduce_bias, reduce_norm) = if ratio > 1 {
            let shape = match mode {
                ReductionMode::Spatial => [dim, dim, ratio, ratio],
                ReductionMode::Sequence => [dim, dim, 1, ratio],
            };
            (
                Some(init.weight(&shape)),
                Some(init.zeros(&[dim])),
                Some(LayerNorm::new(init, dim)),
            )
        } else {
            (None, None, None)
        };
        Ok(AttentionParams {
            wq,
            wk,
            wv,
            wo,
            reduce,
            reduce_bias,
            reduce_norm,
            heads,
            ratio,
            mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.in_dim()
    }

    /// Shortened key/value source, `[N, L/r², C]` or `[N, L/r, C]`.
    fn reduced_source(&self, g: &mut Graph<T>, x: Var, grid: Option<(usize, usize)>) -> Result<Var> {
        let (Some(w), Some(b), Some(norm)) = (&self.reduce, &self.reduce_bias, &self.reduce_norm) else {
            return Ok(x);
        };
        let r = self.ratio;
        let s = g.shape(x).to_vec();
        let (n, l, c) = (s[0], s[1], s[2]);
        let reduced = match self.mode {
            ReductionMode::Spatial => {
                let (h, wd) = grid.ok_or_else(|| {
                    Error::Config("spatial reduction needs the token grid size".into())
                })?;
                if h % r != 0 || wd % r != 0 {
                    return Err(Error::Config(format!(
                        "reduction ratio {r} does not divide the {h}x{wd} token grid"
                    )));
                }
                let map = tokens_to_map(g, x, h, wd)?;
                let wv = g.leaf(w)?;
                let bv = g.leaf(b)?;
                let red = g.conv2d(map, wv, Some(bv), Conv2dSpec::new(r, 0, 1))?;
                map_to_tokens(g, red)?
            }
            ReductionMode::Sequence => {
                if l % r != 0 {
                    return Err(Error::Config(format!(
                        "reduction ratio {r} does not divide the sequence length {l}"
                    )));
                }
                // Kernel [Co, Ci, 1, r] as a [(r·Ci), Co] matrix matching
                // runs of r tokens laid out token-major.
                let wv = g.leaf(w)?;
                let k = g.reshape(wv, &[c, c, r])?;
                let k = g.permute(k, &[2, 1, 0])?;
                let k = g.reshape(k, &[r * c, c])?;
                let runs = g.reshape(x, &[n, l / r, r * c])?;
                let y = g.matmul(runs, k)?;
                let bv = g.leaf(b)?;
                g.add_bias(y, bv)?
            }
        };
        norm.forward(g, reduced)
    }

    /// Attention output `[N, L, C]` together with the attention weights
    /// `[N, heads, L, L']`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph<T>,
        x: Var,
        grid: Option<(usize, usize)>,
    ) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim() {
            return Err(Error::shape(
                "efficient_self_attention",
                format!("expected [N, L, {}], got {s:?}", self.dim()),
            ));
        }
        if let Some((h, w)) = grid {
            if h * w != s[1] {
                return Err(Error::shape(
                    "efficient_self_attention",
                    format!("{} tokens do not tile a {h}x{w} grid", s[1]),
                ));
            }
        }
        let (n, l, c) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, c / self.heads);

        let q = self.wq.forward(g, x)?;
        let q = g.reshape(q, &[n, l, h, dh])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;

        let src = self.reduced_source(g, x, grid)?;
        let lk = g.shape(src)[1];
        let k = self.wk.forward(g, src)?;
        let k = g.reshape(k, &[n, lk, h, dh])?;
        let k = g.permute(k, &[0, 2, 3, 1])?;
        let v = self.wv.forward(g, src)?;
        let v = g.reshape(v, &[n, lk, h, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;

        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, T::one() / T::c(dh as f64).sqrt())?;
        let weights = g.softmax(scores, 3)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, l, c])?;
        Ok((self.wo.forward(g, ctx)?, weights))
    }

    /// Efficient self-attention of `x: [N, L, C]`. `grid` gives the `h×w`
    /// token layout and is required for spatial reduction with `r > 1`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, grid: Option<(usize, usize)>) -> Result<Var> {
        Ok(self.forward_with_weights(g, x, grid)?.0)
    }
}
