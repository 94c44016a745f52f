//! Named traversal over the trainable tensors of a layer or model.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// A component that owns trainable tensors.
///
/// Names are dotted paths (`encoder.stages.0.blocks.1.attn.wq.weight`)
/// and are stable across runs; checkpoints key on them.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_string()));
        names
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut("", &mut |_, t| t.zero_grad());
    }

    /// Copies gradients from a differentiated graph into every parameter's
    /// grad slot. Parameters off the loss path receive zeros.
    fn store_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        let mut res = Ok(());
        self.visit_params_mut("", &mut |_, t| {
            if res.is_ok() {
                res = graph.store_grad(t);
            }
        });
        res
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(m) = self {
            m.visit_params(prefix, f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_params_mut(prefix, f);
        }
    }
}

impl<T: Scalar> Module<T> for Tensor<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(prefix, self);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(prefix, self);
    }
}

/// Implements [`Module`] for a struct by listing its parameter fields.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::params::Module<T> for $ty<T> {
            fn visit_params(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &$crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit_params(&$crate::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_params_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit_params_mut(&$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_module;
