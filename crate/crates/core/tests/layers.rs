mod common;

use bridgeseg::nn::{
    AttentionParams, MixFfn, OverlapPatchEmbed, ParamInit, PatchExpand, PatchMerge, ReductionMode,
    TokenGrid, TransformerBlock, LN_EPS,
};
use bridgeseg::params::Module;
use bridgeseg::{Error, Graph64, Tensor64};
use common::*;

fn grid(g: &mut Graph64, t: &Tensor64, h: usize, w: usize) -> TokenGrid {
    TokenGrid { tokens: g.leaf(t).unwrap(), h, w }
}

#[test]
fn patch_embed_default_geometry_shape() {
    let mut init = ParamInit::new(0);
    let embed = OverlapPatchEmbed::<f64>::default_geometry(&mut init, 3, 16).unwrap();
    let mut g = Graph64::new();
    let x = g.leaf(&normal(&[1, 3, 64, 64], 1.0, 1)).unwrap();
    let out = embed.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(out.tokens), &[1, 256, 16]);
    assert_eq!((out.h, out.w), (16, 16));
}

#[test]
fn pointwise_embed_with_identity_kernel_is_per_pixel_layernorm() {
    let mut init = ParamInit::new(0);
    let mut embed = OverlapPatchEmbed::<f64>::new(&mut init, 4, 4, 1, 1, 0).unwrap();
    let w = embed.proj.weight.data_mut();
    w.fill(0.0);
    for c in 0..4 {
        w[c * 4 + c] = 1.0;
    }
    let x = normal(&[1, 4, 3, 3], 1.0, 2);
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let out = embed.forward(&mut g, xv).unwrap();
    // Tokens in raster order, channels last.
    let mut tokens = Vec::new();
    for p in 0..9 {
        for c in 0..4 {
            tokens.push(x.data()[c * 9 + p]);
        }
    }
    let want = layernorm_rows(&tokens, 4, &[1.0; 4], &[0.0; 4], LN_EPS);
    assert!(max_abs_diff(g.value(out.tokens), &want) < 1e-12);
}

#[test]
fn patch_embed_rejects_indivisible_images() {
    let mut init = ParamInit::new(0);
    let embed = OverlapPatchEmbed::<f64>::default_geometry(&mut init, 3, 8).unwrap();
    let mut g = Graph64::new();
    let x = g.leaf(&Tensor64::zeros(&[1, 3, 30, 30])).unwrap();
    assert!(matches!(embed.forward(&mut g, x), Err(Error::Shape { .. })));
}

#[test]
fn patch_merge_halves_grid() {
    let mut init = ParamInit::new(0);
    let merge = PatchMerge::<f64>::new(&mut init, 16, 32).unwrap();
    let mut g = Graph64::new();
    let x = grid(&mut g, &normal(&[2, 256, 16], 1.0, 3), 16, 16);
    let y = merge.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y.tokens), &[2, 64, 32]);
    assert_eq!((y.h, y.w), (8, 8));

    let odd = grid(&mut g, &normal(&[1, 9, 16], 1.0, 4), 3, 3);
    assert!(merge.forward(&mut g, odd).is_err());
}

#[test]
fn patch_expand_shapes() {
    let mut init = ParamInit::new(0);
    let x2 = PatchExpand::<f64>::new(&mut init, 128, 2).unwrap();
    let mut g = Graph64::new();
    let x = grid(&mut g, &normal(&[1, 4, 128], 1.0, 5), 2, 2);
    let y = x2.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y.tokens), &[1, 16, 64]);
    assert_eq!((y.h, y.w), (4, 4));

    let x4 = PatchExpand::<f64>::new(&mut init, 16, 4).unwrap();
    let x = grid(&mut g, &normal(&[1, 256, 16], 1.0, 6), 16, 16);
    let y = x4.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y.tokens), &[1, 4096, 16]);
    assert_eq!((y.h, y.w), (64, 64));

    assert!(PatchExpand::<f64>::new(&mut init, 7, 2).is_err());
    assert!(PatchExpand::<f64>::new(&mut init, 8, 3).is_err());
}

#[test]
fn patch_expand_places_channel_groups_in_pixel_blocks() {
    let mut init = ParamInit::new(0);
    let mut ex = PatchExpand::<f64>::new(&mut init, 4, 2).unwrap();
    // Identity-like projection: output channel j copies input channel j mod 4.
    let w = ex.proj.weight.data_mut();
    w.fill(0.0);
    for j in 0..8 {
        w[(j % 4) * 8 + j] = 1.0;
    }
    let x = normal(&[1, 4, 4], 1.0, 7);
    let mut g = Graph64::new();
    let xv = grid(&mut g, &x, 2, 2);
    let y = ex.forward(&mut g, xv).unwrap();
    // Coarse token (r, c) expands to fine pixels (2r+i, 2c+j); sub-block
    // index i*2+j picks channels [2(i*2+j), 2(i*2+j)+2) of the expanded vector.
    let mut raw = vec![0.0; 16 * 2];
    for r in 0..2 {
        for c in 0..2 {
            let tok = &x.data()[(r * 2 + c) * 4..][..4];
            let expanded: Vec<f64> = (0..8).map(|j| tok[j % 4]).collect();
            for i in 0..2 {
                for j in 0..2 {
                    let fine = (2 * r + i) * 4 + (2 * c + j);
                    let sub = i * 2 + j;
                    raw[fine * 2..fine * 2 + 2].copy_from_slice(&expanded[sub * 2..sub * 2 + 2]);
                }
            }
        }
    }
    let want = layernorm_rows(&raw, 2, &[1.0; 2], &[0.0; 2], LN_EPS);
    assert!(max_abs_diff(g.value(y.tokens), &want) < 1e-12);
}

#[test]
fn attention_weight_rows_sum_to_one() {
    let mut init = ParamInit::new(1);
    let mut attn = AttentionParams::<f64>::new(&mut init, 16, 2, 2, ReductionMode::Spatial).unwrap();
    jitter(&mut attn, 0.3, 8);
    let mut g = Graph64::new();
    let x = g.leaf(&normal(&[1, 64, 16], 1.0, 9)).unwrap();
    let (y, w) = attn.forward_with_weights(&mut g, x, Some((8, 8))).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 16]);
    assert_eq!(g.shape(w), &[1, 2, 64, 16]);
    for row in g.value(w).chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn spatially_reduced_attention_matches_reference() {
    let (c, h, w, r, heads) = (8, 4, 4, 2, 2);
    let mut init = ParamInit::new(2);
    let mut attn = AttentionParams::<f64>::new(&mut init, c, heads, r, ReductionMode::Spatial).unwrap();
    jitter(&mut attn, 0.3, 10);
    let x = normal(&[1, h * w, c], 1.0, 11);
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let y = attn.forward(&mut g, xv, Some((h, w))).unwrap();

    // Non-overlapping r×r patch projection, then layer norm.
    let (kw, kb) = (attn.reduce.as_ref().unwrap().data(), attn.reduce_bias.as_ref().unwrap().data());
    let (oh, ow) = (h / r, w / r);
    let mut red = vec![0.0; oh * ow * c];
    for py in 0..oh {
        for px in 0..ow {
            for o in 0..c {
                let mut s = kb[o];
                for i in 0..c {
                    for dy in 0..r {
                        for dx in 0..r {
                            let tok = (py * r + dy) * w + (px * r + dx);
                            s += kw[((o * c + i) * r + dy) * r + dx] * x.data()[tok * c + i];
                        }
                    }
                }
                red[(py * ow + px) * c + o] = s;
            }
        }
    }
    let norm = attn.reduce_norm.as_ref().unwrap();
    let red = layernorm_rows(&red, c, norm.gamma.data(), norm.beta.data(), LN_EPS);
    let want = dense_mha(x.data(), h * w, &red, oh * ow, c, heads, &attn);
    assert!(max_abs_diff(g.value(y), &want) < 1e-12);
}

#[test]
fn sequence_reduced_attention_matches_reference() {
    let (c, l, r, heads) = (4, 12, 3, 2);
    let mut init = ParamInit::new(3);
    let mut attn = AttentionParams::<f64>::new(&mut init, c, heads, r, ReductionMode::Sequence).unwrap();
    jitter(&mut attn, 0.3, 12);
    let x = normal(&[1, l, c], 1.0, 13);
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let y = attn.forward(&mut g, xv, None).unwrap();

    // Kernel [C, C, 1, r] sliding over runs of r consecutive tokens.
    let (kw, kb) = (attn.reduce.as_ref().unwrap().data(), attn.reduce_bias.as_ref().unwrap().data());
    let mut red = vec![0.0; l / r * c];
    for j in 0..l / r {
        for o in 0..c {
            let mut s = kb[o];
            for i in 0..c {
                for t in 0..r {
                    s += kw[(o * c + i) * r + t] * x.data()[(j * r + t) * c + i];
                }
            }
            red[j * c + o] = s;
        }
    }
    let norm = attn.reduce_norm.as_ref().unwrap();
    let red = layernorm_rows(&red, c, norm.gamma.data(), norm.beta.data(), LN_EPS);
    let want = dense_mha(x.data(), l, &red, l / r, c, heads, &attn);
    assert!(max_abs_diff(g.value(y), &want) < 1e-12);

    let bad = g.leaf(&normal(&[1, 10, c], 1.0, 14)).unwrap();
    assert!(matches!(attn.forward(&mut g, bad, None), Err(Error::Config(_))));
}

#[test]
fn attention_configuration_errors() {
    let mut init = ParamInit::new(0);
    assert!(AttentionParams::<f64>::new(&mut init, 10, 3, 1, ReductionMode::Spatial).is_err());
    assert!(AttentionParams::<f64>::new(&mut init, 8, 2, 0, ReductionMode::Spatial).is_err());
    let attn = AttentionParams::<f64>::new(&mut init, 8, 2, 3, ReductionMode::Spatial).unwrap();
    let mut g = Graph64::new();
    let x = g.leaf(&normal(&[1, 16, 8], 1.0, 0)).unwrap();
    assert!(attn.forward(&mut g, x, Some((4, 4))).is_err());
    assert!(attn.forward(&mut g, x, None).is_err());
}

#[test]
fn mix_ffn_without_depthwise_term_is_tokenwise() {
    let (c, e, h, w) = (4, 2, 3, 3);
    let mut init = ParamInit::new(4);
    let mut ffn = MixFfn::<f64>::new(&mut init, c, e).unwrap();
    jitter(&mut ffn, 0.3, 15);
    ffn.dw_weight.data_mut().fill(0.0);
    ffn.dw_bias.data_mut().fill(0.0);
    let x = normal(&[1, h * w, c], 1.0, 16);
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let y = ffn.forward(&mut g, xv, h, w).unwrap();

    let hid = c * e;
    let u = affine(x.data(), h * w, ffn.expand.weight.data(), c, hid, ffn.expand.bias.as_ref().map(|b| b.data()));
    let n = layernorm_rows(&u, hid, ffn.inner_norm.gamma.data(), ffn.inner_norm.beta.data(), LN_EPS);
    let a: Vec<f64> = n.iter().map(|&v| gelu(v)).collect();
    let want = affine(&a, h * w, ffn.project.weight.data(), hid, c, ffn.project.bias.as_ref().map(|b| b.data()));
    assert!(max_abs_diff(g.value(y), &want) < 1e-8);
}

#[test]
fn mix_ffn_depthwise_term_sees_neighbours() {
    let mut init = ParamInit::new(5);
    let mut ffn = MixFfn::<f64>::new(&mut init, 4, 2).unwrap();
    jitter(&mut ffn, 0.3, 17);
    let x = normal(&[1, 16, 4], 1.0, 18);
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let y0 = ffn.forward(&mut g, xv, 4, 4).unwrap();
    let y0 = g.tensor(y0);
    // Perturb one token; its 3×3 neighbourhood changes, far tokens do not.
    let mut x2 = x.clone();
    x2.data_mut()[5 * 4] += 1.0; // token (1,1)
    let xv2 = g.leaf(&x2).unwrap();
    let y1 = ffn.forward(&mut g, xv2, 4, 4).unwrap();
    let y1 = g.tensor(y1);
    for tok in 0..16 {
        let (r, c) = (tok / 4, tok % 4);
        let changed = (0..4).any(|k| y0.data()[tok * 4 + k] != y1.data()[tok * 4 + k]);
        let near = r <= 2 && c <= 2;
        assert_eq!(changed, near, "token ({r},{c})");
    }
}

#[test]
fn block_with_zeroed_output_projections_is_identity() {
    let mut init = ParamInit::new(6);
    let mut block = TransformerBlock::<f64>::new(&mut init, 8, 2, 2, 4).unwrap();
    jitter(&mut block, 0.3, 19);
    block.attn.wo.weight.data_mut().fill(0.0);
    block.attn.wo.bias.as_mut().unwrap().data_mut().fill(0.0);
    block.ffn.project.weight.data_mut().fill(0.0);
    block.ffn.project.bias.as_mut().unwrap().data_mut().fill(0.0);
    let x = normal(&[2, 16, 8], 1.0, 20);
    let mut g = Graph64::new();
    let xv = g.leaf(&x).unwrap();
    let y = block.forward(&mut g, xv, 4, 4).unwrap();
    assert_eq!(g.value(y), x.data());
}

#[test]
fn block_parameter_count_has_no_positional_terms() {
    for (c, heads, r, e) in [(8, 2, 1, 4), (16, 4, 2, 4), (32, 1, 4, 2)] {
        let mut init = ParamInit::new(7);
        let block = TransformerBlock::<f64>::new(&mut init, c, heads, r, e).unwrap();
        let attn = 4 * c * c + c + if r > 1 { c * c * r * r + c + 2 * c } else { 0 };
        let hid = e * c;
        let ffn = (c * hid + hid) + (9 * hid + hid) + 2 * hid + (hid * c + c);
        assert_eq!(block.param_count(), 2 * c + attn + 2 * c + ffn);
        assert!(block.param_names().iter().all(|n| !n.contains("pos")));
    }
}

#[test]
fn block_shape_is_preserved_for_any_grid() {
    let mut init = ParamInit::new(8);
    let block = TransformerBlock::<f64>::new(&mut init, 8, 2, 2, 4).unwrap();
    let mut g = Graph64::new();
    for (h, w) in [(2, 2), (4, 8), (8, 4)] {
        let x = g.leaf(&normal(&[1, h * w, 8], 1.0, 21)).unwrap();
        let y = block.forward(&mut g, x, h, w).unwrap();
        assert_eq!(g.shape(y), &[1, h * w, 8]);
    }
    let x = g.leaf(&normal(&[1, 15, 8], 1.0, 22)).unwrap();
    assert!(block.forward(&mut g, x, 4, 4).is_err());
}
