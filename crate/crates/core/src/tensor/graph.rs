//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly, appends a node holding its output
//! and whatever it needs for the backward pass, and returns a [`Var`]
//! handle. [`Graph::backward`] walks the tape once in reverse.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddScalar(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Reshape(Var),
    Permute {
        x: Var,
        src_index: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        offset: usize,
        width: usize,
        row: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation tape. One graph serves one forward pass and at most one
/// backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<TensorId, Var>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name, index });
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.data.clone()).expect("recorded shapes are valid")
    }

    /// Records a tensor. Tensors with `requires_grad` become trainable
    /// leaves and are deduplicated by identity, so a parameter used twice
    /// maps to one node and accumulates both contributions.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        if t.requires_grad {
            if let Some(&v) = self.params.get(&t.id()) {
                return Ok(v);
            }
        }
        let v = self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)?;
        if t.requires_grad {
            self.params.insert(t.id(), v);
        }
        Ok(v)
    }

    /// Records a non-trainable value.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        self.push("constant", shape.to_vec(), data, Op::Leaf, false)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product over the last two axes. `b` is either a plain
    /// `[k, n]` matrix shared by every leading index of `a`, or carries
    /// the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && &sb[..sb.len() - 2] != lead {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a), self.value(b));
            if shared_rhs {
                kernels::gemm_nn(batch * m, k, n, da, db, &mut out);
            } else {
                for bi in 0..batch {
                    kernels::gemm_nn(
                        m,
                        k,
                        n,
                        &da[bi * m * k..(bi + 1) * m * k],
                        &db[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let ng = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            ng,
        )
    }

    /// Grouped 2-D convolution of `x: [N,C,H,W]` with `w: [O,C/g,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and kernel, got {sx:?} and {sw:?}"),
            ));
        }
        let g = spec.groups;
        if g == 0 || spec.stride == 0 || sx[1] % g != 0 || sw[0] % g != 0 {
            return Err(Error::Config(format!(
                "conv2d: {} input and {} output channels not divisible into {g} groups",
                sx[1], sw[0]
            )));
        }
        if sw[1] != sx[1] / g {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {sw:?} expects {} channels per group, input {sx:?} has {}", sw[1], sx[1] / g),
            ));
        }
        let (ph, pw) = (sx[2] + 2 * spec.padding, sx[3] + 2 * spec.padding);
        if ph < sw[2] || pw < sw[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride: spec.stride,
            padding: spec.padding,
            groups: g,
            out_h: (ph - sw[2]) / spec.stride + 1,
            out_w: (pw - sw[3]) / spec.stride + 1,
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), geom.out_ch),
                ));
            }
        }
        let plane = geom.out_plane();
        let (cg, og, kl) = (geom.in_per_group(), geom.out_per_group(), geom.patch_len());
        let img_len = geom.in_ch * geom.height * geom.width;
        let mut out = vec![T::zero(); geom.batch * geom.out_ch * plane];
        let mut cols = vec![T::zero(); kl * plane];
        {
            let (dx, dw) = (self.value(x), self.value(w));
            for nb in 0..geom.batch {
                let image = &dx[nb * img_len..(nb + 1) * img_len];
                for gi in 0..g {
                    kernels::im2col(&geom, image, gi * cg, &mut cols);
                    let o0 = nb * geom.out_ch * plane + gi * og * plane;
                    kernels::gemm_nn(
                        og,
                        kl,
                        plane,
                        &dw[gi * og * kl..(gi + 1) * og * kl],
                        &cols,
                        &mut out[o0..o0 + og * plane],
                    );
                }
            }
            if let Some(b) = bias {
                let db = self.value(b);
                for nb in 0..geom.batch {
                    for o in 0..geom.out_ch {
                        let s = (nb * geom.out_ch + o) * plane;
                        out[s..s + plane].iter_mut().for_each(|v| *v += db[o]);
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        self.push(
            "conv2d",
            vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { x, w, bias, geom },
            ng,
        )
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(name, self.shape(a).to_vec(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a `[C]` vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} against input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let db = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(db).map(|(&v, &b)| v + b))
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        self.push("add_bias", self.shape(x).to_vec(), out, Op::AddBias { x, bias }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale { x, factor }, self.needs(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        self.push("add_scalar", self.shape(x).to_vec(), out, Op::AddScalar(x), self.needs(x))
    }

    /// Exact GELU, `x·Φ(x)` with `Φ` the standard normal CDF computed via `erf`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let half = T::c(0.5);
        let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .iter()
            .map(|&v| v * half * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x), self.needs(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {s:?}")));
        }
        Ok(kernels::axis_extents(s, axis))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", x, axis)?;
        let out = softmax_forward(self.value(x), outer, len, inner, false);
        self.push(
            "softmax",
            self.shape(x).to_vec(),
            out,
            Op::Softmax { x, outer, len, inner },
            self.needs(x),
        )
    }

    /// `log(softmax(x))` along `axis`, computed without forming the softmax.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("log_softmax", x, axis)?;
        let out = softmax_forward(self.value(x), outer, len, inner, true);
        self.push(
            "log_softmax",
            self.shape(x).to_vec(),
            out,
            Op::LogSoftmax { x, outer, len, inner },
            self.needs(x),
        )
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    /// Variance is the biased estimate and `eps` sits inside the root.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gamma {:?} / beta {:?} against input {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    self.shape(x)
                ),
            ));
        }
        let xs = self.value(x);
        let rows = xs.len() / c;
        let inv_c = T::one() / T::c(c as f64);
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xs.chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (gd, bd) = (self.value(gamma), self.value(beta));
        let out = xhat
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layernorm",
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), self.needs(x))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {s:?}"),
            ));
        }
        let src_index = kernels::permute_index(&s, perm);
        let xs = self.value(x);
        let out = src_index.iter().map(|&i| xs[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        self.push("permute", shape, out, Op::Permute { x, src_index }, self.needs(x))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            ng,
        )
    }

    /// Contiguous range `[start, start+len)` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = kernels::axis_extents(&s, axis);
        let (row, offset, width) = (full * inner, start * inner, len * inner);
        let xs = self.value(x);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&xs[o * row + offset..o * row + offset + width]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            "slice",
            shape,
            out,
            Op::Slice {
                x,
                outer,
                offset,
                width,
                row,
            },
            self.needs(x),
        )
    }

    /// Cuts `axis` into consecutive pieces of the given sizes, which must
    /// sum to the axis length.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let s = self.shape(x);
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not partition axis {axis} of {s:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    // ---------------------------------------------------------------- reductions

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().copied().sum::<T>();
        self.push("sum", vec![1], vec![total], Op::Sum(x), self.needs(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sums out `axis`, removing it from the shape (a rank-1 input yields `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("sum_axis", x, axis)?;
        let xs = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &xs[(o * len + i) * inner..(o * len + i + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(
            "sum_axis",
            shape,
            out,
            Op::SumAxis { x, outer, len, inner },
            self.needs(x),
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// A graph can be differentiated once; a second call is a contract
    /// error. Gradients are then read with [`Graph::grad`] or
    /// [`Graph::grad_of`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor recorded through [`Graph::leaf`]. Returns
    /// `None` when the tensor never entered this graph or did not reach
    /// the loss.
    pub fn grad_of(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params.get(&t.id()).and_then(|&v| self.grad(v))
    }

    /// Accumulates this graph's gradient into `t.grad`; zeros when the
    /// tensor is not on the loss path.
    pub fn store_grad(&self, t: &mut Tensor<T>) -> Result<()> {
        match self.grad_of(t) {
            Some(g) => {
                let g = g.to_vec();
                t.accumulate_grad(&g)
            }
            None => {
                let z = vec![T::zero(); t.numel()];
                t.accumulate_grad(&z)
            }
        }
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].data.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&mut self, i: usize, gy: &[T]) {
        // Temporarily move the op out so inputs can be read while
        // gradient buffers are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                if self.needs(a) {
                    let bv = self.nodes[b.0].data.clone();
                    let ga = self.acc(a).expect("needs grad");
                    if shared_rhs {
                        kernels::gemm_nt(batch * m, n, k, gy, &bv, ga);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_nt(
                                m,
                                n,
                                k,
                                &gy[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].data.clone();
                    let gb = self.acc(b).expect("needs grad");
                    if shared_rhs {
                        kernels::gemm_tn(batch * m, k, n, &av, gy, gb);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_tn(
                                m,
                                k,
                                n,
                                &av[bi * m * k..(bi + 1) * m * k],
                                &gy[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.acc(v) {
                        g.iter_mut().zip(gy).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(g) = self.acc(a) {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d += s);
                }
                if let Some(g) = self.acc(b) {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.nodes[b.0].data.clone();
                    let g = self.acc(a).expect("needs grad");
                    g.iter_mut().zip(gy).zip(&bv).for_each(|((d, &s), &o)| *d += s * o);
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].data.clone();
                    let g = self.acc(b).expect("needs grad");
                    g.iter_mut().zip(gy).zip(&av).for_each(|((d, &s), &o)| *d += s * o);
                }
            }
            &Op::Div(a, b) => {
                let bv = self.nodes[b.0].data.clone();
                if self.needs(a) {
                    let g = self.acc(a).expect("needs grad");
                    g.iter_mut().zip(gy).zip(&bv).for_each(|((d, &s), &o)| *d += s / o);
                }
                if self.needs(b) {
                    let out = self.nodes[i].data.clone();
                    let g = self.acc(b).expect("needs grad");
                    for ((d, &s), (&q, &o)) in g.iter_mut().zip(gy).zip(out.iter().zip(&bv)) {
                        *d -= s * q / o;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(g) = self.acc(x) {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d += s);
                }
                if let Some(g) = self.acc(bias) {
                    let c = g.len();
                    for row in gy.chunks_exact(c) {
                        g.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(g) = self.acc(x) {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d += s * factor);
                }
            }
            &Op::AddScalar(x) => {
                if let Some(g) = self.acc(x) {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d += s);
                }
            }
            &Op::Gelu(x) => {
                let xs = self.nodes[x.0].data.clone();
                let half = T::c(0.5);
                let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                if let Some(g) = self.acc(x) {
                    for ((d, &s), &v) in g.iter_mut().zip(gy).zip(&xs) {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                        *d += s * (cdf + v * pdf);
                    }
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[i].data.clone();
                if let Some(g) = self.acc(x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + j;
                            let dotp: T = (0..len).map(|t| gy[at(t)] * y[at(t)]).sum();
                            for t in 0..len {
                                g[at(t)] += y[at(t)] * (gy[at(t)] - dotp);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, outer, len, inner } => {
                let y = self.nodes[i].data.clone();
                if let Some(g) = self.acc(x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + j;
                            let total: T = (0..len).map(|t| gy[at(t)]).sum();
                            for t in 0..len {
                                g[at(t)] += gy[at(t)] - y[at(t)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.nodes[gamma.0].data.len();
                if let Some(g) = self.acc(beta) {
                    for row in gy.chunks_exact(c) {
                        g.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
                if let Some(g) = self.acc(gamma) {
                    for (row, hrow) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &s), &h) in g.iter_mut().zip(row).zip(hrow) {
                            *d += s * h;
                        }
                    }
                }
                if self.needs(x) {
                    let gam = self.nodes[gamma.0].data.clone();
                    let inv_c = T::one() / T::c(c as f64);
                    let g = self.acc(x).expect("needs grad");
                    let mut dh = vec![T::zero(); c];
                    for (r, ((grow, hrow), drow)) in gy
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(g.chunks_exact_mut(c))
                        .enumerate()
                    {
                        for ((d, &s), &gm) in dh.iter_mut().zip(grow).zip(&gam) {
                            *d = s * gm;
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_c;
                        let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        for ((d, &a), &h) in drow.iter_mut().zip(&dh).zip(hrow) {
                            *d += rstd[r] * (a - mean_dh - h * mean_dhh);
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, bias, geom } => {
                let plane = geom.out_plane();
                let (cg, og, kl) = (geom.in_per_group(), geom.out_per_group(), geom.patch_len());
                let img_len = geom.in_ch * geom.height * geom.width;
                if let Some(b) = bias {
                    if let Some(g) = self.acc(b) {
                        for nb in 0..geom.batch {
                            for (o, d) in g.iter_mut().enumerate() {
                                let s = (nb * geom.out_ch + o) * plane;
                                *d += gy[s..s + plane].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let (need_x, need_w) = (self.needs(x), self.needs(w));
                if need_x || need_w {
                    let xs = self.nodes[x.0].data.clone();
                    let ws = self.nodes[w.0].data.clone();
                    let mut gw = if need_w { vec![T::zero(); ws.len()] } else { Vec::new() };
                    let mut gx = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
                    let mut cols = vec![T::zero(); kl * plane];
                    let mut dcols = vec![T::zero(); kl * plane];
                    for nb in 0..geom.batch {
                        for gi in 0..geom.groups {
                            let o0 = nb * geom.out_ch * plane + gi * og * plane;
                            let gout = &gy[o0..o0 + og * plane];
                            if need_w {
                                kernels::im2col(&geom, &xs[nb * img_len..(nb + 1) * img_len], gi * cg, &mut cols);
                                kernels::gemm_nt(og, plane, kl, gout, &cols, &mut gw[gi * og * kl..(gi + 1) * og * kl]);
                            }
                            if need_x {
                                dcols.iter_mut().for_each(|v| *v = T::zero());
                                kernels::gemm_tn(og, kl, plane, &ws[gi * og * kl..(gi + 1) * og * kl], gout, &mut dcols);
                                kernels::col2im(&geom, &dcols, gi * cg, &mut gx[nb * img_len..(nb + 1) * img_len]);
                            }
                        }
                    }
                    if need_w {
                        let g = self.acc(w).expect("needs grad");
                        g.iter_mut().zip(&gw).for_each(|(d, &s)| *d += s);
                    }
                    if need_x {
                        let g = self.acc(x).expect("needs grad");
                        g.iter_mut().zip(&gx).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(g) = self.acc(x) {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Permute { x, src_index } => {
                if let Some(g) = self.acc(*x) {
                    for (&src, &s) in src_index.iter().zip(gy) {
                        g[src] += s;
                    }
                }
            }
            Op::Concat { parts, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(g) = self.acc(p) {
                        for o in 0..*outer {
                            let src = &gy[o * row + offset..o * row + offset + w];
                            g[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice {
                x,
                outer,
                offset,
                width,
                row,
            } => {
                if let Some(g) = self.acc(x) {
                    for o in 0..outer {
                        let dst = &mut g[o * row + offset..o * row + offset + width];
                        dst.iter_mut()
                            .zip(&gy[o * width..(o + 1) * width])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(g) = self.acc(x) {
                    let s = gy[0];
                    g.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::SumAxis { x, outer, len, inner } => {
                if let Some(g) = self.acc(x) {
                    for o in 0..outer {
                        let src = &gy[o * inner..(o + 1) * inner];
                        for t in 0..len {
                            let dst = &mut g[(o * len + t) * inner..(o * len + t + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn softmax_forward<T: Scalar>(xs: &[T], outer: usize, len: usize, inner: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); xs.len()];
    if inner == 1 {
        for (src, dst) in xs.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            if log {
                let lse = total.ln();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s - max - lse;
                }
            } else {
                let inv = T::one() / total;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        return out;
    }
    for o in 0..outer {
        for j in 0..inner {
            let at = |t: usize| (o * len + t) * inner + j;
            let max = (0..len).map(|t| xs[at(t)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..len).map(|t| (xs[at(t)] - max).exp()).sum();
            if log {
                let lse = total.ln();
                for t in 0..len {
                    out[at(t)] = xs[at(t)] - max - lse;
                }
            } else {
                for t in 0..len {
                    out[at(t)] = (xs[at(t)] - max).exp() / total;
                }
            }
        }
    }
    out
}
