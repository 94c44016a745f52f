//! Resolution changes between stages: overlapped patch embedding,
//! strided patch merging and pixel-rearranging patch expansion.

use crate::error::{Error, Result};
use crate::nn::basic::{map_to_tokens, token_dims, tokens_to_map, Conv2d, LayerNorm, Linear};
use crate::nn::init::ParamInit;
use crate::params::impl_module;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, Var};

/// Token tensor `[N, h·w, C]` together with its grid size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

/// Overlapping convolutional patch embedding (`kernel > stride`),
/// followed by flattening to tokens and a layer norm.
#[derive(Debug, Clone)]
pub struct OverlapPatchEmbed<T: Scalar> {
    pub proj: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl_module!(OverlapPatchEmbed { proj, norm });

impl<T: Scalar> OverlapPatchEmbed<T> {
    pub const DEFAULT_KERNEL: usize = 7;
    pub const DEFAULT_STRIDE: usize = 4;
    pub const DEFAULT_PADDING: usize = 3;

    pub fn new(
        init: &mut ParamInit,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel < stride {
            return Err(Error::Config(format!(
                "patch embedding needs kernel >= stride >= 1, got kernel {kernel}, stride {stride}"
            )));
        }
        Ok(OverlapPatchEmbed {
            proj: Conv2d::new(init, cin, cout, kernel, Conv2dSpec::new(stride, padding, 1))?,
            norm: LayerNorm::new(init, cout),
        })
    }

    /// Stage-one default: 7×7 kernel, stride 4, padding 3.
    pub fn default_geometry(init: &mut ParamInit, cin: usize, cout: usize) -> Result<Self> {
        Self::new(
            init,
            cin,
            cout,
            Self::DEFAULT_KERNEL,
            Self::DEFAULT_STRIDE,
            Self::DEFAULT_PADDING,
        )
    }

    /// `img: [N, Cin, H, W]` to tokens on an `H/s × W/s` grid.
    pub fn forward(&self, g: &mut Graph<T>, img: Var) -> Result<TokenGrid> {
        let s = g.shape(img).to_vec();
        let stride = self.proj.spec.stride;
        if s.len() != 4 || s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::shape(
                "overlap_patch_embed",
                format!("image {s:?} is not divisible by the patch stride {stride}"),
            ));
        }
        let map = self.proj.forward(g, img)?;
        let (h, w) = (g.shape(map)[2], g.shape(map)[3]);
        if h * stride != s[2] || w * stride != s[3] {
            return Err(Error::shape(
                "overlap_patch_embed",
                format!("image {s:?} gives a {h}x{w} grid, incompatible with stride {stride}"),
            ));
        }
        let tokens = map_to_tokens(g, map)?;
        let tokens = self.norm.forward(g, tokens)?;
        Ok(TokenGrid { tokens, h, w })
    }
}

/// Stride-2 3×3 convolution that halves the grid and changes width.
#[derive(Debug, Clone)]
pub struct PatchMerge<T: Scalar> {
    pub proj: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl_module!(PatchMerge { proj, norm });

impl<T: Scalar> PatchMerge<T> {
    pub fn new(init: &mut ParamInit, cin: usize, cout: usize) -> Result<Self> {
        Ok(PatchMerge {
            proj: Conv2d::new(init, cin, cout, 3, Conv2dSpec::new(2, 1, 1))?,
            norm: LayerNorm::new(init, cout),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: TokenGrid) -> Result<TokenGrid> {
        token_dims(g, "patch_merge", x.tokens, x.h, x.w)?;
        if x.h % 2 != 0 || x.w % 2 != 0 {
            return Err(Error::shape(
                "patch_merge",
                format!("grid {}x{} has an odd side", x.h, x.w),
            ));
        }
        let map = tokens_to_map(g, x.tokens, x.h, x.w)?;
        let map = self.proj.forward(g, map)?;
        let tokens = map_to_tokens(g, map)?;
        let tokens = self.norm.forward(g, tokens)?;
        Ok(TokenGrid {
            tokens,
            h: x.h / 2,
            w: x.w / 2,
        })
    }
}

/// Up-sampling by rearranging channels into a `factor × factor` block of
/// pixels.
///
/// Factor 2: linear `C → 2C`, each token becomes a 2×2 block of `C/2`-wide
/// tokens. Factor 4: linear `C → 16C`, each token becomes a 4×4 block of
/// `C`-wide tokens. A layer norm follows either way.
#[derive(Debug, Clone)]
pub struct PatchExpand<T: Scalar> {
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
    pub factor: usize,
}

impl_module!(PatchExpand { proj, norm });

impl<T: Scalar> PatchExpand<T> {
    pub fn new(init: &mut ParamInit, dim: usize, factor: usize) -> Result<Self> {
        let (expanded, out_dim) = match factor {
            2 if dim % 2 == 0 => (2 * dim, dim / 2),
            2 => {
                return Err(Error::Config(format!(
                    "x2 patch expansion needs an even width, got {dim}"
                )))
            }
            4 => (16 * dim, dim),
            f => {
                return Err(Error::Config(format!(
                    "patch expansion factor must be 2 or 4, got {f}"
                )))
            }
        };
        Ok(PatchExpand {
            proj: Linear::new(init, dim, expanded, false),
            norm: LayerNorm::new(init, out_dim),
            factor,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.norm.dim()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: TokenGrid) -> Result<TokenGrid> {
        let (n, _, c) = token_dims(g, "patch_expand", x.tokens, x.h, x.w)?;
        if c != self.proj.in_dim() {
            return Err(Error::shape(
                "patch_expand",
                format!("width {c}, layer expects {}", self.proj.in_dim()),
            ));
        }
        let f = self.factor;
        let co = self.out_dim();
        let y = self.proj.forward(g, x.tokens)?;
        let y = g.reshape(y, &[n, x.h, x.w, f, f, co])?;
        let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let (h, w) = (x.h * f, x.w * f);
        let y = g.reshape(y, &[n, h * w, co])?;
        let tokens = self.norm.forward(g, y)?;
        Ok(TokenGrid { tokens, h, w })
    }
}
