//! Small parameterized layers shared by the branches and the decoder.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self::with_std(store, name, d_in, d_out, bias, std, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let w = store.add_randn(format!("{name}.w"), &[d_in, d_out], std, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Value-level evaluation, for oracles and inspection.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(store.dtype());
        let xv = tape.constant(x.to_dtype(store.dtype()))?;
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Affine layer norm over the last axis.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[d]),
            beta: store.add_zeros(format!("{name}.beta"), &[d]),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.layer_norm(x, Some(g), Some(b), self.eps)
    }
}

/// Two-layer perceptron `silu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.silu(h);
        self.l2.forward(tape, store, h)
    }
}

/// Scaled dot-product attention of `q_in: [M, C]` over `kv_in: [N, C]`,
/// with `heads` equal column groups.
#[derive(Debug, Clone)]
pub struct Attention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut SplitMix64) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        Self {
            w_q: store.add_randn(format!("{name}.w_q"), &[d_model, d_model], std, rng),
            w_k: store.add_randn(format!("{name}.w_k"), &[d_model, d_model], std, rng),
            w_v: store.add_randn(format!("{name}.w_v"), &[d_model, d_model], std, rng),
            heads,
            d_model,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q_in: Var, kv_in: Var) -> Result<Var> {
        let wq = tape.param(store, self.w_q)?;
        let wk = tape.param(store, self.w_k)?;
        let wv = tape.param(store, self.w_v)?;
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;
        let dk = self.d_model / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dk, dk)?,
                    tape.slice_cols(k, h * dk, dk)?,
                    tape.slice_cols(v, h * dk, dk)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax(s, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_cols(&outs)
        }
    }
}
