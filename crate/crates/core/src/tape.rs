//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to apply its adjoint. Nodes only reference earlier nodes, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::spectral;
use crate::ssm::{ScanMode, ScanRecord};
use crate::tensor::{DType, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Silu,
    Sigmoid,
    /// `exp(-softplus(x))` pulled in by [`SQUASH_MARGIN`] on both ends, so the
    /// result stays strictly inside (0, 1) even where the sigmoid saturates.
    Squash,
    Exp,
    Cos,
    Sin,
    Abs,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Kernel `[c_out, c_in, k]`.
    Standard,
    /// Kernel `[c, k]`, one filter per channel.
    Depthwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralPart {
    Re,
    Im,
}

/// Distance the squash keeps from 0 and 1.
pub const SQUASH_MARGIN: f64 = 1e-6;

/// Amplitudes below this are treated as zero by the polar ops.
pub const AMPLITUDE_GUARD: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        mode: ConvMode,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Dft {
        x: Var,
        part: SpectralPart,
    },
    IdftReal {
        re: Var,
        im: Var,
    },
    Amplitude {
        re: Var,
        im: Var,
    },
    Phase {
        re: Var,
        im: Var,
    },
    Scan(Box<ScanRecord>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded operation record. Independent tapes may run on separate threads.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    dtype: DType,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(DType::F64)
    }
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op) -> Var {
        if self.dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = DType::F32.round(*v));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data, self.dtype),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::Softmax { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Dft { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma.iter().chain(beta.iter()));
                v
            }
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::ConcatCols(parts) => parts.clone(),
            Op::IdftReal { re, im } | Op::Amplitude { re, im } | Op::Phase { re, im } => {
                vec![*re, *im]
            }
            Op::Scan(rec) => rec.inputs().to_vec(),
        }
    }

    fn check_dtype(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if t.dtype() != self.dtype {
            return Err(Error::DType {
                op,
                lhs: self.dtype,
                rhs: t.dtype(),
            });
        }
        Ok(())
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.check_dtype("constant", &t)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf))
    }

    /// Leaf that records a gradient (for checking gradients w.r.t. inputs).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.check_dtype("input", &t)?;
        let shape = t.shape().to_vec();
        let v = self.push(shape, t.into_data(), Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Loads a parameter; repeated loads return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let t = store.value(id);
        self.check_dtype("param", t)?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; n], Op::Leaf)
    }

    // ---- arithmetic -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn ew(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let mut out = Vec::with_capacity(plan.len());
        plan.for_each(|_, ia, ib| out.push(f(ad[ia], bd[ib])));
        Ok(self.push(plan.shape.clone(), out, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Silu => |v| v * sigmoid(v),
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Squash => squash,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Cos => f64::cos,
            UnaryOp::Sin => f64::sin,
            UnaryOp::Abs => f64::abs,
            UnaryOp::Square => |v| v * v,
        };
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        self.push(t.shape().to_vec(), out, Op::Unary(op, x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        self.push(t.shape().to_vec(), out, Op::Scale(x, c))
    }

    /// Normalizes over the last axis, then applies the optional affine pair.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in gamma.iter().chain(beta.iter()) {
            if self.value(*p).len() != d {
                return Err(Error::dim("layer_norm", &shape, self.shape(*p)));
            }
        }
        let xs = self.value(x).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let (inv, _) = normalize_row(row, &mut xhat[r * d..(r + 1) * d], eps);
            inv_std[r] = inv;
        }
        let g = gamma.map(|v| self.value(v).data());
        let b = beta.map(|v| self.value(v).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % d;
                h * g.map_or(1.0, |g| g[j]) + b.map_or(0.0, |b| b[j])
            })
            .collect();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| xs[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (xs[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] /= s;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    /// Same-length 1D convolution along the first axis of `x: [T, C]`.
    pub fn conv1d(&mut self, x: Var, w: Var, mode: ConvMode) -> Result<Var> {
        let (t, c_in) = self.value(x).dims2()?;
        let ws = self.shape(w).to_vec();
        let (c_out, k) = match (mode, ws.as_slice()) {
            (ConvMode::Standard, [o, i, k]) if *i == c_in => (*o, *k),
            (ConvMode::Depthwise, [c, k]) if *c == c_in => (*c, *k),
            _ => return Err(Error::dim("conv1d", self.shape(x), &ws)),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {k}")));
        }
        let out = conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            t,
            c_in,
            c_out,
            k,
            mode,
        );
        Ok(self.push(vec![t, c_out], out, Op::Conv1d { x, w, mode }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols || len == 0 {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }))
    }

    /// `out[s] = x[index[s]]` along the first axis; `index` is a constant.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let w: usize = shape[1..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", &shape, &[bad]));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(&xs[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = index.len();
        Ok(self.push(
            out_shape,
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Mean over rows: `[R, C] -> [1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xs[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.push(vec![1, c], out, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x))
    }

    // ---- spectral ---------------------------------------------------------

    /// One part of the unitary DFT along the first axis of `x: [T, d]`.
    pub fn dft(&mut self, x: Var, part: SpectralPart) -> Result<Var> {
        let (t, d) = self.value(x).dims2()?;
        let (re, im) = spectral::real_dft_columns(self.value(x).data(), t, d);
        let out = match part {
            SpectralPart::Re => re,
            SpectralPart::Im => im,
        };
        Ok(self.push(vec![t, d], out, Op::Dft { x, part }))
    }

    /// Real part of the unitary inverse DFT of `(re, im)` along the first axis.
    pub fn idft_real(&mut self, re: Var, im: Var) -> Result<Var> {
        let (t, d) = self.value(re).dims2()?;
        if self.shape(im) != self.shape(re) {
            return Err(Error::dim("idft_real", self.shape(re), self.shape(im)));
        }
        let (rr, _) = spectral::real_dft_columns(self.value(re).data(), t, d);
        let (_, ii) = spectral::real_dft_columns(self.value(im).data(), t, d);
        let out = rr.iter().zip(&ii).map(|(a, b)| a + b).collect();
        Ok(self.push(vec![t, d], out, Op::IdftReal { re, im }))
    }

    pub fn amplitude(&mut self, re: Var, im: Var) -> Result<Var> {
        if self.shape(im) != self.shape(re) {
            return Err(Error::dim("amplitude", self.shape(re), self.shape(im)));
        }
        let out = self
            .value(re)
            .data()
            .iter()
            .zip(self.value(im).data())
            .map(|(a, b)| a.hypot(*b))
            .collect();
        let shape = self.shape(re).to_vec();
        Ok(self.push(shape, out, Op::Amplitude { re, im }))
    }

    pub fn phase(&mut self, re: Var, im: Var) -> Result<Var> {
        if self.shape(im) != self.shape(re) {
            return Err(Error::dim("phase", self.shape(re), self.shape(im)));
        }
        let out = self
            .value(re)
            .data()
            .iter()
            .zip(self.value(im).data())
            .map(|(&a, &b)| spectral::guarded_phase(a, b))
            .collect();
        let shape = self.shape(re).to_vec();
        Ok(self.push(shape, out, Op::Phase { re, im }))
    }

    // ---- selective scan ---------------------------------------------------

    /// Fused selective scan; see [`crate::ssm`] for the recurrence.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        x: Var,
        h0: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let (t, d_in) = self.value(x).dims2()?;
        let n = self.value(h0).len();
        let p = self.value(d).len() / (t * d_in).max(1);
        let expect = |v: Var, len: usize, name: &'static str| -> Result<()> {
            if self.value(v).len() != len {
                return Err(Error::dim(name, self.shape(v), &[len]));
            }
            Ok(())
        };
        expect(a, t * n, "selective_scan(A)")?;
        expect(b, t * n * d_in, "selective_scan(B)")?;
        expect(c, t * p * n, "selective_scan(C)")?;
        expect(d, t * p * d_in, "selective_scan(D)")?;
        let (rec, y) = ScanRecord::forward(
            [a, b, c, d, x, h0],
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            self.value(x).data(),
            self.value(h0).data(),
            (t, n, d_in, p),
            mode,
        )?;
        Ok(self.push(vec![t, p], y, Op::Scan(Box::new(rec))))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Propagates adjoints from a scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn node_backward(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = node.value.shape()[1];
                if needs(*a) {
                    let da = matmul_nt(g, val(*b), m, n, k);
                    add_into(grads, *a, &da);
                }
                if needs(*b) {
                    let db = matmul_tn(val(*a), g, m, k, n);
                    add_into(grads, *b, &db);
                }
            }
            Op::Binary(op, a, b) => {
                let plan = Broadcast::new(self.shape(*a), self.shape(*b)).unwrap();
                let (ad, bd) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = vec![0.0; ad.len()];
                    plan.for_each(|o, ia, ib| {
                        da[ia] += match op {
                            BinaryOp::Add | BinaryOp::Sub => g[o],
                            BinaryOp::Mul => g[o] * bd[ib],
                        }
                    });
                    add_into(grads, *a, &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; bd.len()];
                    plan.for_each(|o, ia, ib| {
                        db[ib] += match op {
                            BinaryOp::Add => g[o],
                            BinaryOp::Sub => -g[o],
                            BinaryOp::Mul => g[o] * ad[ia],
                        }
                    });
                    add_into(grads, *b, &db);
                }
            }
            Op::Unary(op, x) => {
                let xs = val(*x);
                let dx: Vec<f64> = xs
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&v, &y), &gi)| {
                        gi * match op {
                            UnaryOp::Silu => {
                                let s = sigmoid(v);
                                s * (1.0 + v * (1.0 - s))
                            }
                            UnaryOp::Sigmoid => y * (1.0 - y),
                            UnaryOp::Squash => {
                                let s = sigmoid(-v);
                                -(1.0 - 2.0 * SQUASH_MARGIN) * s * (1.0 - s)
                            }
                            UnaryOp::Exp => y,
                            UnaryOp::Cos => -v.sin(),
                            UnaryOp::Sin => v.cos(),
                            UnaryOp::Abs => {
                                if v > 0.0 {
                                    1.0
                                } else if v < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Square => 2.0 * v,
                        }
                    })
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let rows = xhat.len() / d;
                if let Some(gm) = gamma.filter(|v| needs(*v)) {
                    let mut dg = vec![0.0; d];
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gi * h;
                    }
                    add_into(grads, gm, &dg);
                }
                if let Some(bt) = beta.filter(|v| needs(*v)) {
                    let mut db = vec![0.0; d];
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                    add_into(grads, bt, &db);
                }
                if needs(*x) {
                    let gam = gamma.map(val);
                    let mut dx = vec![0.0; xhat.len()];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam.map_or(1.0, |gm| gm[j]);
                        }
                        layer_norm_row_backward(
                            &dxhat,
                            &xhat[r * d..(r + 1) * d],
                            inv_std[r],
                            &mut dx[r * d..(r + 1) * d],
                        );
                    }
                    add_into(grads, *x, &dx);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::Conv1d { x, w, mode } => {
                let (t, c_in) = self.nodes[x.0].value.dims2().unwrap();
                let c_out = node.value.shape()[1];
                let k = *self.shape(*w).last().unwrap();
                let (dx, dw) = conv1d_backward(g, val(*x), val(*w), t, c_in, c_out, k, *mode);
                if needs(*x) {
                    add_into(grads, *x, &dx);
                }
                if needs(*w) {
                    add_into(grads, *w, &dw);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::Reshape(x) => add_into(grads, *x, g),
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_into(grads, p, &dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.nodes[x.0].value.dims2().unwrap();
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                add_into(grads, *x, &dx);
            }
            Op::GatherRows { x, index } => {
                let xv = &self.nodes[x.0].value;
                let w: usize = xv.shape()[1..].iter().product();
                let mut dx = vec![0.0; xv.len()];
                for (s, &i) in index.iter().enumerate() {
                    for j in 0..w {
                        dx[i * w + j] += g[s * w + j];
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let inv = 1.0 / r as f64;
                let dx: Vec<f64> = (0..r * c).map(|i| g[i % c] * inv).collect();
                add_into(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                add_into(grads, *x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                add_into(grads, *x, &vec![g[0] / n as f64; n]);
            }
            Op::Dft { x, part } => {
                // The cosine and negated-sine maps are symmetric, so the adjoint
                // is the same transform applied to the upstream gradient.
                let (t, d) = node.value.dims2().unwrap();
                let (re, im) = spectral::real_dft_columns(g, t, d);
                let dx = match part {
                    SpectralPart::Re => re,
                    SpectralPart::Im => im,
                };
                add_into(grads, *x, &dx);
            }
            Op::IdftReal { re, im } => {
                let (t, d) = node.value.dims2().unwrap();
                let (gr, gi) = spectral::real_dft_columns(g, t, d);
                if needs(*re) {
                    add_into(grads, *re, &gr);
                }
                if needs(*im) {
                    add_into(grads, *im, &gi);
                }
            }
            Op::Amplitude { re, im } => {
                let (rs, is) = (val(*re), val(*im));
                let coef = |sel: fn(f64, f64) -> f64| -> Vec<f64> {
                    (0..out.len())
                        .map(|i| {
                            if out[i] < AMPLITUDE_GUARD {
                                0.0
                            } else {
                                g[i] * sel(rs[i], is[i]) / out[i]
                            }
                        })
                        .collect()
                };
                if needs(*re) {
                    add_into(grads, *re, &coef(|r, _| r));
                }
                if needs(*im) {
                    add_into(grads, *im, &coef(|_, i| i));
                }
            }
            Op::Phase { re, im } => {
                let (rs, is) = (val(*re), val(*im));
                let coef = |sel: fn(f64, f64) -> f64| -> Vec<f64> {
                    (0..out.len())
                        .map(|i| {
                            let a2 = rs[i] * rs[i] + is[i] * is[i];
                            if a2.sqrt() < AMPLITUDE_GUARD {
                                0.0
                            } else {
                                g[i] * sel(rs[i], is[i]) / a2
                            }
                        })
                        .collect()
                };
                if needs(*re) {
                    add_into(grads, *re, &coef(|_, i| -i));
                }
                if needs(*im) {
                    add_into(grads, *im, &coef(|r, _| r));
                }
            }
            Op::Scan(rec) => {
                let inputs = rec.inputs();
                let vals: [&[f64]; 6] = std::array::from_fn(|i| val(inputs[i]));
                let d_in = rec.backward(g, vals);
                for (v, dv) in inputs.iter().zip(d_in) {
                    if needs(*v) {
                        add_into(grads, *v, &dv);
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient w.r.t. `v`, or `None` when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter loaded on `tape`, ordered by parameter id.
    pub fn params(&self, tape: &Tape) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = tape
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self
                    .wrt(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `m + (1 - 2m) * sigmoid(-v)`; equals `exp(-softplus(v))` up to the margin.
#[inline]
pub fn squash(v: f64) -> f64 {
    SQUASH_MARGIN + (1.0 - 2.0 * SQUASH_MARGIN) * sigmoid(-v)
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Writes the normalized row into `out`; returns `(1/std, mean)`.
pub(crate) fn normalize_row(row: &[f64], out: &mut [f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - mean) * inv;
    }
    (inv, mean)
}

/// `dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))`, accumulated.
pub(crate) fn layer_norm_row_backward(dxhat: &[f64], xhat: &[f64], inv_std: f64, dx: &mut [f64]) {
    let d = xhat.len() as f64;
    let m1 = dxhat.iter().sum::<f64>() / d;
    let m2 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
    for j in 0..xhat.len() {
        dx[j] += inv_std * (dxhat[j] - m1 - xhat[j] * m2);
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g [m, n] * b^T` where `b` is `[k, n]`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T [k, m] * g [m, n]` where `a` is `[m, k]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    t: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    mode: ConvMode,
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; t * c_out];
    for ti in 0..t {
        for j in 0..k {
            let src = ti + j;
            if src < pad || src - pad >= t {
                continue;
            }
            let xrow = &x[(src - pad) * c_in..(src - pad + 1) * c_in];
            match mode {
                ConvMode::Depthwise => {
                    for c in 0..c_in {
                        out[ti * c_out + c] += w[c * k + j] * xrow[c];
                    }
                }
                ConvMode::Standard => {
                    for o in 0..c_out {
                        let mut s = 0.0;
                        for (i, xv) in xrow.iter().enumerate() {
                            s += w[(o * c_in + i) * k + j] * xv;
                        }
                        out[ti * c_out + o] += s;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    t: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    mode: ConvMode,
) -> (Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for ti in 0..t {
        for j in 0..k {
            let src = ti + j;
            if src < pad || src - pad >= t {
                continue;
            }
            let s = src - pad;
            match mode {
                ConvMode::Depthwise => {
                    for c in 0..c_in {
                        let go = g[ti * c_out + c];
                        dw[c * k + j] += go * x[s * c_in + c];
                        dx[s * c_in + c] += go * w[c * k + j];
                    }
                }
                ConvMode::Standard => {
                    for o in 0..c_out {
                        let go = g[ti * c_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        for i in 0..c_in {
                            dw[(o * c_in + i) * k + j] += go * x[s * c_in + i];
                            dx[s * c_in + i] += go * w[(o * c_in + i) * k + j];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Index plan for numpy-style broadcasting of two shapes.
struct Broadcast {
    shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self {
                shape: a.to_vec(),
                a_strides: vec![],
                b_strides: vec![],
                same: true,
            });
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            shape.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::dim("broadcast", a, b)),
            });
        }
        let strides = |p: &[usize]| -> Vec<usize> {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if p[i] == 1 { 0 } else { acc };
                acc *= p[i];
            }
            st
        };
        Ok(Self {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            shape,
            same: false,
        })
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.len();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ia += self.a_strides[ax];
                ib += self.b_strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                ia -= self.a_strides[ax] * self.shape[ax];
                ib -= self.b_strides[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
    }
}
