use std::collections::HashMap;

use super::{broadcast_shape, broadcast_strides, validate_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Silu,
    Tanh,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Summary of one backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes that received a gradient and were processed, each exactly once.
    pub nodes_visited: usize,
    /// Leaves whose gradient was updated.
    pub leaves_updated: usize,
}

/// Append-only operation record. Node ids are assigned in creation order, so
/// the node list is already topologically sorted and backward is a single
/// reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push_raw(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_raw(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_raw(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts_unchecked(n.shape.clone(), n.value.clone())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(shape, value, op, requires_grad))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or(Error::OutOfRange {
                what: "operand",
                detail: format!("{kind:?} needs two operands"),
            })
        };
        match kind {
            Elementwise::Add => self.add(a, need_b(b)?),
            Elementwise::Sub => self.sub(a, need_b(b)?),
            Elementwise::Mul => self.mul(a, need_b(b)?),
            Elementwise::Div => self.div(a, need_b(b)?),
            Elementwise::Neg => self.scale(a, -1.0),
            Elementwise::Silu => self.silu(a),
            Elementwise::Tanh => self.tanh(a),
            Elementwise::Exp => self.exp(a),
            Elementwise::Log => self.log(a),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(va[ia], vb[ib]));
        self.push(name, out_shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(name, shape, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    /// SiLU, `x * sigmoid(x)`: the smooth nonlinearity used throughout.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![m], Op::Mean(a), &[a])
    }

    // ---- linear algebra and layout ----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "transpose needs rank 2".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(&self.nodes[a.0].value, r, c);
        self.push("transpose", vec![c, r], out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(a), &[a])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::OutOfRange {
                what: "permutation",
                detail: format!("{perm:?} for rank {}", s.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&s, perm, |o, i| out[o] = src[i]);
        self.push(
            "permute",
            out_shape,
            out,
            Op::Permute(a, perm.to_vec()),
            &[a],
        )
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(Error::OutOfRange {
                what: "concat",
                detail: "no inputs".into(),
            })?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push("concat_last", shape, out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let w = s[s.len() - 1];
        if len == 0 || start + len > w {
            return Err(Error::OutOfRange {
                what: "slice",
                detail: format!("[{start}, {}) of width {w}", start + len),
            });
        }
        let rows = s[..s.len() - 1].iter().product::<usize>();
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = len;
        self.push(
            "slice_last",
            shape,
            out,
            Op::SliceLast { x: a, start },
            &[a],
        )
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "gather_rows needs a rank-2 table and at least one id".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::OutOfRange {
                what: "row id",
                detail: format!("{bad} >= {}", s[0]),
            });
        }
        let d = s[1];
        let src = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "gather_rows",
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    // ---- normalisation ----------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::OutOfRange {
                what: "axis",
                detail: format!("{axis} for rank {}", s.len()),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| src[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        self.push("softmax", s, out, Op::Softmax { x: a, axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = s[s.len() - 1];
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row_in.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in row_out.iter_mut().zip(row_in) {
                *o = x - lse;
            }
        }
        self.push("log_softmax", s, out, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalisation over the last axis with `LAYER_NORM_EPS` inside the
    /// square root, followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = s[s.len() - 1];
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &s, self.shape(gain)));
        }
        let src = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            s,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// 2-D convolution over a channels-last grid `[H, W, Cin]` with kernel
    /// `[KH, KW, Cin, Cout]` (odd extents), bias `[Cout]`, stride 1 and zero
    /// "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sx[2] || sw[0] % 2 == 0 || sw[1] % 2 == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[3]] {
            return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
        }
        let geo = ConvGeom::new(&sx, &sw);
        let out = geo.forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        self.push(
            "conv2d",
            vec![geo.h, geo.w, geo.cout],
            out,
            Op::Conv2d { x, w, b },
            &[x, w, b],
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut report = BackwardReport {
            nodes_visited: 0,
            leaves_updated: 0,
        };
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            report.nodes_visited += 1;
            if matches!(self.nodes[id].op, Op::Leaf) {
                match self.leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(id, g);
                    }
                }
                report.leaves_updated += 1;
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(report)
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shp = |v: Var| self.nodes[v.0].shape.as_slice();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (a, b) = (*a, *b);
                acc(a, &mut |ga| {
                    for_each_broadcast(&node.shape, shp(a), shp(b), |i, ia, _| ga[ia] += g[i])
                });
                acc(b, &mut |gb| {
                    for_each_broadcast(&node.shape, shp(a), shp(b), |i, _, ib| {
                        gb[ib] += sign * g[i]
                    })
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for_each_broadcast(&node.shape, shp(a), shp(b), |i, ia, ib| {
                        ga[ia] += g[i] * vb[ib]
                    })
                });
                acc(b, &mut |gb| {
                    for_each_broadcast(&node.shape, shp(a), shp(b), |i, ia, ib| {
                        gb[ib] += g[i] * va[ia]
                    })
                });
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for_each_broadcast(&node.shape, shp(a), shp(b), |i, ia, ib| {
                        ga[ia] += g[i] / vb[ib]
                    })
                });
                acc(b, &mut |gb| {
                    for_each_broadcast(&node.shape, shp(a), shp(b), |i, ia, ib| {
                        gb[ib] -= g[i] * va[ia] / (vb[ib] * vb[ib])
                    })
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)
            }),
            Op::Silu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), &v) in ga.iter_mut().zip(g).zip(va) {
                        let s = sigmoid(v);
                        *x += gi * s * (1.0 + v * (1.0 - s));
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += gi * (1.0 - y * y);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += gi * y;
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(va) {
                        *x += gi / v;
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[1]);
                if wants(a) {
                    // dA += dC · Bᵀ
                    let vb = val(b);
                    acc(a, &mut |ga| gemm_acc(m, n, k, g, (n, 1), vb, (1, n), ga));
                }
                if wants(b) {
                    // dB += Aᵀ · dC
                    let va = val(a);
                    acc(b, &mut |gb| gemm_acc(k, m, n, va, (1, k), g, (n, 1), gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                let gt = transpose_raw(g, c, r);
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(&gt).for_each(|(x, d)| *x += d)
                });
            }
            Op::Permute(a, perm) => {
                let s = shp(*a);
                acc(*a, &mut |ga| {
                    for_each_permuted(s, perm, |o, i| ga[i] += g[o])
                });
            }
            Op::Concat(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = g.len() / total;
                let mut col = 0;
                for &p in parts {
                    let w = *shp(p).last().unwrap();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceLast { x, start } => {
                let w = *shp(*x).last().unwrap();
                let len = *node.shape.last().unwrap();
                let rows = g.len() / len;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * w + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = shp(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = *node.shape.last().unwrap();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(node.value.chunks_exact(d))
                    {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..d {
                            gxr[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = val(*gain);
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, ((gxr, gr), hr)) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let gh: Vec<f64> = (0..d).map(|j| gr[j] * gv[j]).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghh: f64 = gh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            gxr[j] += scale * (d as f64 * gh[j] - sum_gh - hr[j] * sum_ghh);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let geo = ConvGeom::new(shp(*x), shp(*w));
                if wants(*b) {
                    acc(*b, &mut |gb| {
                        for gr in g.chunks_exact(geo.cout) {
                            gb.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                        }
                    });
                }
                if wants(*w) {
                    let vx = val(*x);
                    acc(*w, &mut |gw| geo.grad_weight(vx, g, gw));
                }
                if wants(*x) {
                    let vw = val(*w);
                    acc(*x, &mut |gx| geo.grad_input(vw, g, gx));
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, (k, 1), b, (n, 1), &mut c);
    c
}

/// `c[m, n] += a[m, k] · b[k, n]` with explicit (row, column) strides for
/// `a` and `b`; `c` is row-major.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds row-major views of `a` ([m, k]),
    // `b` ([k, n]), and `c` ([m, n]); the callers pass slices of exactly those
    // sizes, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let (na, nb) = (sa.iter().product::<usize>(), sb.iter().product::<usize>());
    if sa == out && sb == out {
        (0..n).for_each(|i| f(i, i, i));
    } else if sa == out && is_suffix(sb, out) {
        (0..n).for_each(|i| f(i, i, i % nb));
    } else if sb == out && is_suffix(sa, out) {
        (0..n).for_each(|i| f(i, i % na, i));
    } else {
        let (st_a, st_b) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
        let mut idx = vec![0usize; out.len()];
        let (mut ia, mut ib) = (0usize, 0usize);
        for i in 0..n {
            f(i, ia, ib);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                ia += st_a[ax];
                ib += st_b[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                ia -= st_a[ax] * out[ax];
                ib -= st_b[ax] * out[ax];
                idx[ax] = 0;
            }
        }
    }
}

/// True when `s` equals the trailing dims of `out` (dropping leading axes only).
fn is_suffix(s: &[usize], out: &[usize]) -> bool {
    let k = s.len();
    k <= out.len() && &out[out.len() - k..] == s
}

/// Calls `f(out_offset, in_offset)` for a permutation of `shape` by `perm`.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for o in 0..n {
        f(o, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize]) -> Self {
        Self {
            h: sx[0],
            w: sx[1],
            cin: sx[2],
            kh: sw[0],
            kw: sw[1],
            cout: sw[3],
        }
    }

    /// Visits each (output cell, kernel tap, input cell) triple that lies inside the grid.
    #[inline]
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for y in 0..self.h {
            for x in 0..self.w {
                let o = y * self.w + x;
                for dy in 0..self.kh {
                    let sy = y + dy;
                    if sy < ph || sy - ph >= self.h {
                        continue;
                    }
                    for dx in 0..self.kw {
                        let sx = x + dx;
                        if sx < pw || sx - pw >= self.w {
                            continue;
                        }
                        f(o, dy * self.kw + dx, (sy - ph) * self.w + (sx - pw));
                    }
                }
            }
        }
    }

    /// `[H*W, KH*KW*Cin]` patch matrix in the kernel's `(tap, cin)` order.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cin = self.cin;
        let width = self.kh * self.kw * cin;
        let mut cols = vec![0.0; self.h * self.w * width];
        self.taps(|o, tap, i| {
            cols[o * width + tap * cin..o * width + (tap + 1) * cin]
                .copy_from_slice(&x[i * cin..(i + 1) * cin]);
        });
        cols
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let cout = self.cout;
        let width = self.kh * self.kw * self.cin;
        let mut out = vec![0.0; self.h * self.w * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
        let cols = self.im2col(x);
        gemm_acc(
            self.h * self.w,
            width,
            cout,
            &cols,
            (width, 1),
            w,
            (cout, 1),
            &mut out,
        );
        out
    }

    fn grad_weight(&self, x: &[f64], g: &[f64], gw: &mut [f64]) {
        let width = self.kh * self.kw * self.cin;
        let cols = self.im2col(x);
        let hw = self.h * self.w;
        gemm_acc(
            width,
            hw,
            self.cout,
            &cols,
            (1, width),
            g,
            (self.cout, 1),
            gw,
        );
    }

    fn grad_input(&self, w: &[f64], g: &[f64], gx: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        let width = self.kh * self.kw * cin;
        let hw = self.h * self.w;
        let mut gcols = vec![0.0; hw * width];
        gemm_acc(hw, cout, width, g, (cout, 1), w, (1, cout), &mut gcols);
        self.taps(|o, tap, i| {
            let src = &gcols[o * width + tap * cin..o * width + (tap + 1) * cin];
            gx[i * cin..(i + 1) * cin]
                .iter_mut()
                .zip(src)
                .for_each(|(a, b)| *a += b);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_identities() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);

        let x = tape.constant(t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]));
        let ones = tape.constant(Tensor::ones(&[2, 2]));
        let zeros = tape.constant(Tensor::zeros(&[2, 2]));
        let m = tape.mul(x, ones).unwrap();
        let s = tape.add(x, zeros).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
        assert_eq!(tape.value(s), tape.value(x));
    }

    #[test]
    fn elementwise_dispatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.elementwise(Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);
        assert!(tape.elementwise(Elementwise::Mul, a, None).is_err());
        let n = tape.elementwise(Elementwise::Neg, a, None).unwrap();
        assert_eq!(tape.value(n), &[-1.0, -2.0]);
    }

    #[test]
    fn shape_mismatch_and_non_finite() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(tape.log(a), Err(Error::NonFinite { .. })));
        let z = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_cases() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia), tape.value(a));

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p), &[11.0]);
        assert_eq!(tape.shape(p), &[1, 1]);
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        // accumulation on repeat
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Detached)));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        // diamond: y = x*x + x*x
        let a = tape.mul(x, x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let y = tape.add(a, b).unwrap();
        let unrelated = tape.constant(t(&[2], &[5.0, 5.0]));
        let _u = tape.add(unrelated, unrelated).unwrap();
        let s = tape.sum(y).unwrap();
        let report = tape.backward(s).unwrap();
        // s, y, a, b, x
        assert_eq!(report.nodes_visited, 5);
        assert_eq!(report.leaves_updated, 1);
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn softmax_and_layer_norm_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        let one = tape.constant(t(&[3, 1], &[4.0, -1.0, 7.0]));
        let s1 = tape.softmax(one, 1).unwrap();
        assert_eq!(tape.value(s1), &[1.0, 1.0, 1.0]);

        let c = tape.constant(t(&[4], &[3.0; 4]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let ln = tape.layer_norm(c, g, b).unwrap();
        assert_eq!(tape.value(ln), &[0.0; 4]);

        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -1.0, 0.0, 0.5, 0.25]));
        let ln = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(ln).chunks(4) {
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_middle_axis_rows_sum_to_one() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s);
        for o in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|k| v[(o * 3 + k) * 4 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element (k, i, j) of p is x[i, j, k]
        assert_eq!(tape.value(p)[(2 + 1) * 3 + 2], data[(3 + 2) * 4 + 1]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), &data[..]);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        let x = tape.constant(t(&[3, 2, 2], &data));
        let mut w = vec![0.0; 3 * 3 * 2 * 2];
        // centre tap, identity channel map
        w[(4 * 2) * 2] = 1.0;
        w[(4 * 2 + 1) * 2 + 1] = 1.0;
        let w = tape.constant(t(&[3, 3, 2, 2], &w));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y), &data[..]);
    }
}
