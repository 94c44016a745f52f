use crate::error::{Error, Result};
use crate::nn::basic::{map_to_tokens, token_dims, tokens_to_map, LayerNorm, Linear};
use crate::nn::init::ParamInit;
use crate::params::impl_module;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, Tensor, Var};

/// Feed-forward network with a depthwise 3×3 convolution for local context.
///
/// `u = expand(x)`, `s = dwconv3x3(u)`, `y = project(gelu(norm(s + u)))`.
/// The skip around the convolution keeps the token-wise path intact.
#[derive(Debug, Clone)]
pub struct MixFfn<T: Scalar> {
    pub expand: Linear<T>,
    pub dw_weight: Tensor<T>,
    pub dw_bias: Tensor<T>,
    pub inner_norm: LayerNorm<T>,
    pub project: Linear<T>,
}

impl_module!(MixFfn {
    expand,
    dw_weight,
    dw_bias,
    inner_norm,
    project
});

impl<T: Scalar> MixFfn<T> {
    pub fn new(init: &mut ParamInit, dim: usize, expansion: usize) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Config("ffn expansion must be >= 1".into()));
        }
        let hidden = dim * expansion;
        Ok(MixFfn {
            expand: Linear::new(init, dim, hidden, true),
            dw_weight: init.weight(&[hidden, 1, 3, 3]),
            dw_bias: init.zeros(&[hidden]),
            inner_norm: LayerNorm::new(init, hidden),
            project: Linear::new(init, hidden, dim, true),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.expand.out_dim()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        token_dims(g, "mix_ffn", x, h, w)?;
        let u = self.expand.forward(g, x)?;
        let map = tokens_to_map(g, u, h, w)?;
        let kw = g.leaf(&self.dw_weight)?;
        let kb = g.leaf(&self.dw_bias)?;
        let groups = self.hidden_dim();
        let local = g.conv2d(map, kw, Some(kb), Conv2dSpec::new(1, 1, groups))?;
        let local = map_to_tokens(g, local)?;
        let mixed = g.add(local, u)?;
        let mixed = self.inner_norm.forward(g, mixed)?;
        let act = g.gelu(mixed)?;
        self.project.forward(g, act)
    }
}
