use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of every weight tensor at initialization.
pub const INIT_STD: f64 = 0.02;

/// Seeded source of initial parameter values.
///
/// Weights are normal with σ = [`INIT_STD`], truncated (by rejection) to
/// ±2σ; biases and layer-norm shifts start at zero and layer-norm scales
/// at one. Parameters are drawn in construction order, so a given seed
/// always reproduces the same model.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn trunc_normal(&mut self) -> f64 {
        loop {
            let z: f64 = self.rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                return z * INIT_STD;
            }
        }
    }

    pub fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(self.trunc_normal())).collect();
        Tensor::new(shape, data).expect("shape").with_grad()
    }

    pub fn zeros<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape).with_grad()
    }

    pub fn ones<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::ones(shape).with_grad()
    }
}
