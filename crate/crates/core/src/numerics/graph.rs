//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Every op appends a node whose parents precede it, so node order is a
//! topological order and backward is a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{gemm, inverse_permutation, numel, permute, Array};
use super::NumericsError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Evaluation mode. Dropout is active only in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Finite-difference checking: deterministic, no stochastic ops.
    Check,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    StopGrad,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, cols: Array },
    Upsample { x: Var, factor: usize },
}

struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    sg_record: Vec<Array>,
    sg_replay: Option<(Vec<Array>, usize)>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// (outer, axis extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn im2col(x: &Array, geom: ConvGeometry, ho: usize, wo: usize) -> Array {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = geom.kernel;
    let row_len = k * k * c;
    let mut cols = vec![0.0; b * ho * wo * row_len];
    let xd = x.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    Array::from_parts(vec![b * ho * wo, row_len], cols)
}

fn col2im(dcols: &Array, in_shape: &[usize], geom: ConvGeometry, ho: usize, wo: usize) -> Array {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let k = geom.kernel;
    let row_len = k * k * c;
    let mut dx = vec![0.0; b * h * w * c];
    let dc = dcols.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ci in 0..c {
                            dx[dst + ci] += dc[src + ci];
                        }
                    }
                }
            }
        }
    }
    Array::from_parts(in_shape.to_vec(), dx)
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sg_record: Vec::new(),
            sg_replay: None,
        }
    }

    /// A graph whose stop-gradient nodes return previously recorded values
    /// instead of their live inputs. Used by finite-difference checks so that
    /// perturbations do not leak through severed paths.
    pub fn with_replay(mode: Mode, seed: u64, record: Vec<Array>) -> Self {
        let mut g = Graph::new(mode, seed);
        g.sg_replay = Some((record, 0));
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_stop_gradient_record(&mut self) -> Vec<Array> {
        std::mem::take(&mut self.sg_record)
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op, rg: bool) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Result<Var, NumericsError> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Array) -> Result<Var, NumericsError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> Result<Var, NumericsError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward ops ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NumericsError> {
        let out = gemm(self.value(a), ta, self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul { a, b, ta, tb }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (x, y) = (self.value(a), self.value(b));
        Array::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// `x + bias` where `bias` matches the trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(NumericsError::Shape {
                op: "add_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let bd = self.value(bias).data();
        let blen = bd.len();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % blen])
            .collect();
        let out = Array::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", out, Op::AddBias { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push("scale", out, Op::Scale(x, c), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericsError::Shape {
                op: "permute",
                lhs: self.shape(x).to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let out = permute(self.value(x), perm);
        let rg = self.rg(x);
        self.push("permute", out, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    /// Swap the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(NumericsError::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(NumericsError::Shape { op: "concat", lhs: first, rhs: vec![axis] });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(NumericsError::Shape { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p)[axis];
                let chunk = s * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat",
            Array::from_parts(shape, out),
            Op::Concat { parts: parts.to_vec(), axis },
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(NumericsError::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        self.push("slice", Array::from_parts(oshape, out), Op::Slice { x, axis, start }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let cols = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let out = Array::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push("softmax", out, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push("sum", Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push("mean", Array::scalar(s), Op::Mean(x), rg)
    }

    /// Sum along `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Shape { op: "sum_axis", lhs: shape, rhs: vec![axis] });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let rg = self.rg(x);
        self.push("sum_axis", Array::from_parts(oshape, out), Op::SumAxis { x, axis }, rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(name, out, op, rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    /// Inverted dropout; the identity outside `Mode::Train`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, NumericsError> {
        if self.mode != Mode::Train || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(NumericsError::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(x);
        let out = Array::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        let rg = self.rg(x);
        self.push("dropout", out, Op::Dropout { x, mask }, rg)
    }

    /// Identity in value; contributes no gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = match &mut self.sg_replay {
            Some((record, cursor)) => {
                let v = record.get(*cursor).cloned().ok_or_else(|| {
                    NumericsError::Invalid("stop-gradient replay exhausted".into())
                })?;
                *cursor += 1;
                if v.shape() != self.nodes[x.0].value.shape() {
                    return Err(NumericsError::Shape {
                        op: "stop_gradient",
                        lhs: self.nodes[x.0].value.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                v
            }
            None => self.value(x).clone(),
        };
        self.sg_record.push(value.clone());
        self.push("stop_gradient", value, Op::StopGrad, false)
    }

    /// 2-D convolution over channels-last input `[B, H, W, C]` with weight
    /// `[k*k*C, O]` (row order ky, kx, c) and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let err = || NumericsError::Shape { op: "conv2d", lhs: xs.clone(), rhs: ws.clone() };
        if xs.len() != 4 || ws.len() != 2 || ws[0] != geom.kernel * geom.kernel * xs[3] {
            return Err(err());
        }
        let ho = geom.output_extent(xs[1]).ok_or_else(err)?;
        let wo = geom.output_extent(xs[2]).ok_or_else(err)?;
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(NumericsError::Shape {
                    op: "conv2d bias",
                    lhs: ws.clone(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let cols = im2col(self.value(x), geom, ho, wo);
        let mut out = gemm(&cols, false, self.value(w), false)?;
        if let Some(b) = b {
            let bd = self.value(b).data();
            let o = bd.len();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bd[i % o];
            }
        }
        let out = out.reshaped(&[xs[0], ho, wo, ws[1]])?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Nearest-neighbour upsampling of channels-last `[B, H, W, C]`.
    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(NumericsError::Shape { op: "upsample2d", lhs: s, rhs: vec![factor] });
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (h2, w2) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * h2 * w2 * c];
        for bi in 0..b {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let src = ((bi * h + y / factor) * w + xx / factor) * c;
                    let dst = ((bi * h2 + y) * w2 + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            "upsample2d",
            Array::from_parts(vec![b, h2, w2, c], out),
            Op::Upsample { x, factor },
            rg,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), NumericsError> {
        let root_shape = self.shape(root).to_vec();
        if numel(&root_shape) != 1 {
            return Err(NumericsError::NonScalarRoot(root_shape));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Array::full(&root_shape, 1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: Array, grads: &mut [Option<Array>]) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if self.rg(a) {
                    let da = if ta {
                        gemm(val(b), tb, &g, true)?
                    } else {
                        gemm(&g, false, val(b), !tb)?
                    };
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let db = if tb {
                        gemm(&g, true, val(a), ta)?
                    } else {
                        gemm(val(a), !ta, &g, false)?
                    };
                    self.accumulate(grads, b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let da = mul_arrays(&g, val(*b));
                let db = mul_arrays(&g, val(*a));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::AddBias { x, bias } => {
                if self.rg(*bias) {
                    let bshape = val(*bias).shape().to_vec();
                    let blen = numel(&bshape);
                    let mut db = vec![0.0; blen];
                    for (k, v) in g.data().iter().enumerate() {
                        db[k % blen] += v;
                    }
                    self.accumulate(grads, *bias, Array::from_parts(bshape, db));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Reshape(x) => {
                let s = val(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshaped(&s)?);
            }
            Op::Permute { x, perm } => {
                let inv = inverse_permutation(perm);
                self.accumulate(grads, *x, permute(&g, &inv));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let ext = ps[*axis];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(numel(&ps));
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        self.accumulate(grads, p, Array::from_parts(ps, d));
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape().to_vec();
                let (outer, ext, inner) = split_axis(&xs, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; numel(&xs)];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * ext * inner + start * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Array::from_parts(xs, d));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..cols {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(grads, *x, Array::from_parts(y.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let s = val(*x).shape();
                self.accumulate(grads, *x, Array::full(s, g.item()));
            }
            Op::Mean(x) => {
                let v = val(*x);
                let gv = g.item() / v.len() as f64;
                self.accumulate(grads, *x, Array::full(v.shape(), gv));
            }
            Op::SumAxis { x, axis } => {
                let xs = val(*x).shape().to_vec();
                let (outer, ext, inner) = split_axis(&xs, *axis);
                let mut d = vec![0.0; numel(&xs)];
                for o in 0..outer {
                    for a in 0..ext {
                        let base = (o * ext + a) * inner;
                        d[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Array::from_parts(xs, d));
            }
            Op::Abs(x) => {
                let d = zip_map(&g, val(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let d = zip_map(&g, val(*x), |gv, xv| 2.0 * xv * gv);
                self.accumulate(grads, *x, d);
            }
            Op::Sqrt(x) => {
                let d = zip_map(&g, &node.value, |gv, y| 0.5 * gv / y);
                if !d.is_finite() {
                    return Err(NumericsError::NonFinite { op: "sqrt backward" });
                }
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = zip_map(&g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = zip_map(&g, val(*x), |gv, xv| gv * gelu_grad(xv));
                self.accumulate(grads, *x, d);
            }
            Op::Dropout { x, mask } => {
                let d = Array::from_parts(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
                );
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let out_c = node.value.shape()[3];
                let rows = node.value.len() / out_c;
                let gm = g.reshaped(&[rows, out_c])?;
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; out_c];
                        for (k, v) in gm.data().iter().enumerate() {
                            db[k % out_c] += v;
                        }
                        self.accumulate(grads, *b, Array::from_parts(vec![out_c], db));
                    }
                }
                if self.rg(*w) {
                    let dw = gemm(cols, true, &gm, false)?;
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*x) {
                    let dcols = gemm(&gm, false, val(*w), true)?;
                    let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
                    let dx = col2im(&dcols, val(*x).shape(), *geom, ho, wo);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Upsample { x, factor } => {
                let xs = val(*x).shape().to_vec();
                let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let (h2, w2) = (h * factor, w * factor);
                let mut d = vec![0.0; numel(&xs)];
                for bi in 0..b {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let dst = ((bi * h + y / factor) * w + xx / factor) * c;
                            let src = ((bi * h2 + y) * w2 + xx) * c;
                            for ci in 0..c {
                                d[dst + ci] += g.data()[src + ci];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Array::from_parts(xs, d));
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Array, x: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::from_parts(
        g.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn mul_arrays(a: &Array, b: &Array) -> Array {
    zip_map(a, b, |p, q| p * q)
}
