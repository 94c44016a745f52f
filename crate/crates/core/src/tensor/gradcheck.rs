//! Central finite-difference verification of tape gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::Module;

/// Relative error floor for coordinates where both gradients vanish.
pub const REL_FLOOR: f64 = 1e-8;

/// Default finite-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a − fd| / max(|a|, |fd|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate (across all checked tensors, in order) where the
    /// maximum occurred.
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst_index: 0,
            checked: 0,
        }
    }

    fn record(&mut self, err: f64) {
        if err > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst_index = self.checked;
        }
        self.checked += 1;
    }

    pub fn merge(mut self, other: &GradCheckReport) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = self.checked + other.worst_index;
        }
        self.checked += other.checked;
        self
    }
}

fn scalar_of(g: &Graph<f64>, out: Var, index: usize) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    if !v[0].is_finite() {
        return Err(Error::GradCheck {
            index,
            detail: "function value is not finite".into(),
        });
    }
    Ok(v[0])
}

fn eval_at<F>(f: &F, inputs: &[Tensor<f64>], index: usize) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.leaf(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars).map_err(|e| Error::GradCheck {
        index,
        detail: e.to_string(),
    })?;
    scalar_of(&g, out, index)
}

/// Max relative error between the tape gradient of the scalar function
/// `f` at `x` and its central finite difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Checks the gradient with respect to every coordinate of every input.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.requires_grad = true;
            c
        })
        .collect();

    let mut g = Graph::new();
    let vars = work.iter().map(|t| g.leaf(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out, 0)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&work)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut report = GradCheckReport::new();
    let mut flat = 0;
    for ti in 0..work.len() {
        for ci in 0..work[ti].numel() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let plus = eval_at(&f, &work, flat)?;
            work[ti].data_mut()[ci] = orig - eps;
            let minus = eval_at(&f, &work, flat)?;
            work[ti].data_mut()[ci] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            report.record(relative_error(analytic[ti][ci], fd));
            flat += 1;
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to the parameters of `module`.
///
/// With `per_tensor = Some(k)`, at most `k` coordinates of each parameter
/// tensor are checked, chosen by `seed`; `None` checks all of them.
pub fn grad_check_params<M, F>(
    module: &mut M,
    f: F,
    eps: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: Fn(&M, &mut Graph<f64>) -> Result<Var>,
{
    module.visit_params_mut("", &mut |_, t| {
        t.requires_grad = true;
        t.zero_grad();
    });
    let mut g = Graph::new();
    let out = f(module, &mut g)?;
    scalar_of(&g, out, 0)?;
    g.backward(out)?;
    module.store_grads(&g)?;
    drop(g);

    // (tensor index, coordinate, analytic) for every sampled coordinate.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<(usize, usize, f64)> = Vec::new();
    let mut ti = 0;
    module.visit_params("", &mut |_, t| {
        let grad = t.grad().expect("grads stored");
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < t.numel() => {
                let mut c = sample(&mut rng, t.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..t.numel()).collect(),
        };
        targets.extend(coords.into_iter().map(|c| (ti, c, grad[c])));
        ti += 1;
    });

    let mut report = GradCheckReport::new();
    for (flat, &(tensor, coord, analytic)) in targets.iter().enumerate() {
        let mut values = [0.0; 2];
        for (slot, delta) in [eps, -eps].into_iter().enumerate() {
            nudge(module, tensor, coord, delta);
            let mut g = Graph::new();
            let res = f(module, &mut g).map_err(|e| Error::GradCheck {
                index: flat,
                detail: e.to_string(),
            });
            let res = res.and_then(|out| scalar_of(&g, out, flat));
            nudge(module, tensor, coord, -delta);
            values[slot] = res?;
        }
        let fd = (values[0] - values[1]) / (2.0 * eps);
        report.record(relative_error(analytic, fd));
    }
    Ok(report)
}

fn nudge<M: Module<f64>>(module: &mut M, tensor: usize, coord: usize, delta: f64) {
    let mut ti = 0;
    module.visit_params_mut("", &mut |_, t| {
        if ti == tensor {
            t.data_mut()[coord] += delta;
        }
        ti += 1;
    });
}
