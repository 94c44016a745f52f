//! Layer-by-layer finite-difference gradient suite at toy sizes (64-bit).
//!
//! Each case checks the gradient of a random linear readout `Σ y ⊙ R`
//! with respect to every input coordinate and every parameter
//! coordinate. Parameters are moved off their initial values first so that
//! no check runs in the near-degenerate regime of a tiny init.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::NUM_CLASSES;
use crate::error::Result;
use crate::metrics::IndexMask;
use crate::nn::{
    AttentionParams, MixFfn, OverlapPatchEmbed, ParamInit, PatchExpand, PatchMerge, ReductionMode,
    TransformerBlock,
};
use crate::params::Module;
use crate::tensor::gradcheck::{grad_check_inputs, grad_check_params, GradCheckReport, DEFAULT_EPS};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{loss, LossWeights};

/// Pass threshold for every layer.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn jitter_params<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng, scale: f64) {
    m.visit_params_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    });
}

/// `Σ y ⊙ r` for a fixed random `r` the shape of `y`.
fn readout(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(g.shape(y).to_vec().as_slice(), r.data().to_vec())?;
    let p = g.mul(y, rv)?;
    g.sum(p)
}

/// Runs input and parameter checks for one layer.
fn check_layer<M, F>(
    name: &str,
    mut module: M,
    input: Tensor<f64>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    forward: F,
) -> Result<LayerCheck>
where
    M: Module<f64>,
    F: Fn(&M, &mut Graph<f64>, Var) -> Result<Var>,
{
    let start = Instant::now();
    jitter_params(&mut module, rng, 0.3);
    let r = normal_tensor(rng, out_shape, 1.0);
    let seed = rng.random();

    let inputs = grad_check_inputs(
        |g, vars| {
            let y = forward(&module, g, vars[0])?;
            readout(g, y, &r)
        },
        std::slice::from_ref(&input),
        DEFAULT_EPS,
    )?;
    let params = grad_check_params(
        &mut module,
        |m, g| {
            let x = g.constant(input.shape(), input.data().to_vec())?;
            let y = forward(m, g, x)?;
            readout(g, y, &r)
        },
        DEFAULT_EPS,
        None,
        seed,
    )?;
    Ok(LayerCheck {
        name: name.to_string(),
        report: inputs.merge(&params),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The full suite: patch embed, merge, both expansions, spatial attention
/// at r = 1 and r = 2, sequence-reduced attention, mix-FFN, block, loss.
pub fn layer_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit::new(seed);
    let mut out = Vec::new();

    let embed = OverlapPatchEmbed::<f64>::default_geometry(&mut init, 3, 8)?;
    let x = normal_tensor(&mut rng, &[1, 3, 8, 8], 1.0);
    out.push(check_layer("patch_embed", embed, x, &[1, 4, 8], &mut rng, |m, g, x| {
        Ok(m.forward(g, x)?.tokens)
    })?);

    let merge = PatchMerge::<f64>::new(&mut init, 4, 8)?;
    let x = normal_tensor(&mut rng, &[1, 16, 4], 1.0);
    out.push(check_layer("patch_merge", merge, x, &[1, 4, 8], &mut rng, |m, g, x| {
        Ok(m.forward(g, crate::nn::TokenGrid { tokens: x, h: 4, w: 4 })?.tokens)
    })?);

    let expand2 = PatchExpand::<f64>::new(&mut init, 8, 2)?;
    let x = normal_tensor(&mut rng, &[1, 4, 8], 1.0);
    out.push(check_layer("patch_expand_x2", expand2, x, &[1, 16, 4], &mut rng, |m, g, x| {
        Ok(m.forward(g, crate::nn::TokenGrid { tokens: x, h: 2, w: 2 })?.tokens)
    })?);

    let expand4 = PatchExpand::<f64>::new(&mut init, 4, 4)?;
    let x = normal_tensor(&mut rng, &[1, 4, 4], 1.0);
    out.push(check_layer("patch_expand_x4", expand4, x, &[1, 64, 4], &mut rng, |m, g, x| {
        Ok(m.forward(g, crate::nn::TokenGrid { tokens: x, h: 2, w: 2 })?.tokens)
    })?);

    for ratio in [1, 2] {
        let attn = AttentionParams::<f64>::new(&mut init, 8, 2, ratio, ReductionMode::Spatial)?;
        let x = normal_tensor(&mut rng, &[1, 16, 8], 1.0);
        out.push(check_layer(
            &format!("attention_r{ratio}"),
            attn,
            x,
            &[1, 16, 8],
            &mut rng,
            |m, g, x| m.forward(g, x, Some((4, 4))),
        )?);
    }

    let seq = AttentionParams::<f64>::new(&mut init, 4, 2, 2, ReductionMode::Sequence)?;
    let x = normal_tensor(&mut rng, &[1, 12, 4], 1.0);
    out.push(check_layer("attention_sequence_r2", seq, x, &[1, 12, 4], &mut rng, |m, g, x| {
        m.forward(g, x, None)
    })?);

    let ffn = MixFfn::<f64>::new(&mut init, 4, 2)?;
    let x = normal_tensor(&mut rng, &[1, 16, 4], 1.0);
    out.push(check_layer("mix_ffn", ffn, x, &[1, 16, 4], &mut rng, |m, g, x| {
        m.forward(g, x, 4, 4)
    })?);

    let block = TransformerBlock::<f64>::new(&mut init, 4, 2, 2, 2)?;
    let x = normal_tensor(&mut rng, &[1, 16, 4], 1.0);
    out.push(check_layer("transformer_block", block, x, &[1, 16, 4], &mut rng, |m, g, x| {
        m.forward(g, x, 4, 4)
    })?);

    out.push(loss_check(&mut rng)?);
    Ok(out)
}

fn loss_check(rng: &mut ChaCha8Rng) -> Result<LayerCheck> {
    let start = Instant::now();
    let k = NUM_CLASSES as usize;
    let logits = normal_tensor(rng, &[2, k, 4, 4], 1.5);
    let masks: Vec<IndexMask> = (0..2)
        .map(|_| {
            let data = (0..16).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
            IndexMask::new(4, 4, data).expect("4x4")
        })
        .collect();
    let report = grad_check_inputs(
        |g, v| loss(g, v[0], &masks, LossWeights::default()),
        std::slice::from_ref(&logits),
        DEFAULT_EPS,
    )?;
    Ok(LayerCheck {
        name: "loss".into(),
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
