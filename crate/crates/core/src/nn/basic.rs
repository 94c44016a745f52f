use crate::error::{Error, Result};
use crate::nn::init::ParamInit;
use crate::params::impl_module;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, Tensor, Var};

/// Layer-norm epsilon, added to the variance inside the square root.
pub const LN_EPS: f64 = 1e-6;

/// Affine map over the last axis: `x·W + b` with `W: [Cin, Cout]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl_module!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut ParamInit, cin: usize, cout: usize, bias: bool) -> Self {
        Linear {
            weight: init.weight(&[cin, cout]),
            bias: bias.then(|| init.zeros(&[cout])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.leaf(&self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.leaf(b)?;
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl_module!(LayerNorm { gamma, beta });

impl<T: Scalar> LayerNorm<T> {
    pub fn new(init: &mut ParamInit, dim: usize) -> Self {
        LayerNorm {
            gamma: init.ones(&[dim]),
            beta: init.zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.leaf(&self.gamma)?;
        let beta = g.leaf(&self.beta)?;
        g.layernorm(x, gamma, beta, T::c(LN_EPS))
    }
}

/// 2-D convolution with bias, weight `[O, C/groups, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: Conv2dSpec,
}

impl_module!(Conv2d { weight, bias });

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        init: &mut ParamInit,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Config(format!(
                "conv with {cin} -> {cout} channels cannot use {} groups",
                spec.groups
            )));
        }
        Ok(Conv2d {
            weight: init.weight(&[cout, cin / spec.groups, kernel, kernel]),
            bias: init.zeros(&[cout]),
            spec,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.leaf(&self.weight)?;
        let b = g.leaf(&self.bias)?;
        g.conv2d(x, w, Some(b), self.spec)
    }
}

/// `[N, L, C]` tokens on an `h×w` grid to a `[N, C, h, w]` map.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape(
            "tokens_to_map",
            format!("tokens {s:?} do not tile a {h}x{w} grid"),
        ));
    }
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// `[N, C, h, w]` map to `[N, h·w, C]` tokens.
pub fn map_to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("map_to_tokens", format!("expected [N,C,H,W], got {s:?}")));
    }
    let t = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(t, &[0, 2, 1])
}

/// Checks a `[N, L, C]` token tensor against its grid and returns `(N, L, C)`.
pub fn token_dims<T: Scalar>(
    g: &Graph<T>,
    op: &'static str,
    x: Var,
    h: usize,
    w: usize,
) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape(op, format!("tokens {s:?} do not tile a {h}x{w} grid")));
    }
    Ok((s[0], s[1], s[2]))
}
