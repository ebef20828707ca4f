//! Input-dependent selective state-space scan.
//!
//! For `t = 0..T`, with readout state `q` and raw state `r` (`q_0 = r_0 = h0`):
//!
//! ```text
//! y(t)    = C_t q_t + D_t x(t)
//! r_{t+1} = a_t * prev_t + B_t x(t)        (a_t diagonal, entries in (0,1))
//! q_{t+1} = LayerNorm(SiLU(r_{t+1}))
//! ```
//!
//! `prev_t` is `q_t` in [`ScanMode::Feedback`] (the normalized state drives the
//! recurrence) and `r_t` in [`ScanMode::OutputOnly`]. [`ScanMode::Raw`] skips
//! the normalization so `q == r`. The per-step matrices come from small
//! perceptrons over `concat(x(t), conv(x)(t))`; they do not depend on the
//! state, so all `T` steps are generated in one batched pass and only the
//! recurrence itself is sequential.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{layer_norm_row_backward, normalize_row, sigmoid, ConvMode, Tape, UnaryOp, Var};
use crate::tensor::Tensor;

/// Epsilon of the state normalization.
pub const STATE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// No state normalization.
    Raw,
    /// The normalized state feeds both the next step and the readout.
    #[default]
    Feedback,
    /// The normalized state only feeds the readout.
    OutputOnly,
}

/// Saved forward state of one fused scan.
#[derive(Debug)]
pub struct ScanRecord {
    inputs: [Var; 6],
    dims: (usize, usize, usize, usize),
    mode: ScanMode,
    /// Raw states `r_0..=r_T`, `(T+1) x n`.
    r: Vec<f64>,
    /// Readout states `q_0..=q_T`.
    q: Vec<f64>,
    /// Normalized SiLU outputs and their inverse std for steps `1..=T`.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl ScanRecord {
    pub(crate) fn inputs(&self) -> &[Var; 6] {
        &self.inputs
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        inputs: [Var; 6],
        a: &[f64],
        b: &[f64],
        c: &[f64],
        d: &[f64],
        x: &[f64],
        h0: &[f64],
        dims: (usize, usize, usize, usize),
        mode: ScanMode,
    ) -> Result<(Self, Vec<f64>)> {
        let (t_len, n, d_in, p) = dims;
        if h0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalStability { step: 0 });
        }
        let mut r = vec![0.0; (t_len + 1) * n];
        let mut q = vec![0.0; (t_len + 1) * n];
        let mut xhat = vec![0.0; t_len * n];
        let mut inv_std = vec![0.0; t_len];
        let mut silu_buf = vec![0.0; n];
        r[..n].copy_from_slice(h0);
        q[..n].copy_from_slice(h0);
        let mut y = vec![0.0; t_len * p];
        for t in 0..t_len {
            let xt = &x[t * d_in..(t + 1) * d_in];
            let qt = &q[t * n..(t + 1) * n];
            let ct = &c[t * p * n..(t + 1) * p * n];
            let dt = &d[t * p * d_in..(t + 1) * p * d_in];
            for o in 0..p {
                y[t * p + o] = dot(&ct[o * n..(o + 1) * n], qt) + dot(&dt[o * d_in..(o + 1) * d_in], xt);
            }
            let at = &a[t * n..(t + 1) * n];
            let bt = &b[t * n * d_in..(t + 1) * n * d_in];
            let prev_off = match mode {
                ScanMode::OutputOnly => t * n,
                _ => usize::MAX,
            };
            for i in 0..n {
                let prev = if prev_off == usize::MAX { q[t * n + i] } else { r[prev_off + i] };
                let v = at[i] * prev + dot(&bt[i * d_in..(i + 1) * d_in], xt);
                r[(t + 1) * n + i] = v;
            }
            let rn = &r[(t + 1) * n..(t + 2) * n];
            if rn.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalStability { step: t });
            }
            match mode {
                ScanMode::Raw => {
                    q[(t + 1) * n..(t + 2) * n].copy_from_slice(rn);
                }
                _ => {
                    for (s, &v) in silu_buf.iter_mut().zip(rn) {
                        *s = v * sigmoid(v);
                    }
                    let xh = &mut xhat[t * n..(t + 1) * n];
                    let (inv, _) = normalize_row(&silu_buf, xh, STATE_NORM_EPS);
                    inv_std[t] = inv;
                    q[(t + 1) * n..(t + 2) * n].copy_from_slice(xh);
                }
            }
        }
        Ok((
            Self {
                inputs,
                dims,
                mode,
                r,
                q,
                xhat,
                inv_std,
            },
            y,
        ))
    }

    /// Adjoints for `[a, b, c, d, x, h0]`.
    pub(crate) fn backward(&self, dy: &[f64], vals: [&[f64]; 6]) -> Vec<Vec<f64>> {
        let (t_len, n, d_in, p) = self.dims;
        let [a, b, c, d, x, _h0] = vals;
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; b.len()];
        let mut dc = vec![0.0; c.len()];
        let mut dd = vec![0.0; d.len()];
        let mut dx = vec![0.0; x.len()];
        let mut gq = vec![0.0; n];
        let mut gr = vec![0.0; n];
        let mut ds = vec![0.0; n];
        for t in (0..t_len).rev() {
            // fold the adjoint of q_{t+1} into r_{t+1}
            match self.mode {
                ScanMode::Raw => gr.iter_mut().zip(&gq).for_each(|(r, q)| *r += q),
                _ => {
                    ds.iter_mut().for_each(|v| *v = 0.0);
                    layer_norm_row_backward(
                        &gq,
                        &self.xhat[t * n..(t + 1) * n],
                        self.inv_std[t],
                        &mut ds,
                    );
                    let rn = &self.r[(t + 1) * n..(t + 2) * n];
                    for i in 0..n {
                        let s = sigmoid(rn[i]);
                        gr[i] += ds[i] * s * (1.0 + rn[i] * (1.0 - s));
                    }
                }
            }
            let xt = &x[t * d_in..(t + 1) * d_in];
            let at = &a[t * n..(t + 1) * n];
            let bt = &b[t * n * d_in..(t + 1) * n * d_in];
            let ct = &c[t * p * n..(t + 1) * p * n];
            let dt = &d[t * p * d_in..(t + 1) * p * d_in];
            let qt = &self.q[t * n..(t + 1) * n];
            let prev = match self.mode {
                ScanMode::OutputOnly => &self.r[t * n..(t + 1) * n],
                _ => qt,
            };
            let dxt = &mut dx[t * d_in..(t + 1) * d_in];
            let mut g_prev = vec![0.0; n];
            for i in 0..n {
                let g = gr[i];
                da[t * n + i] = g * prev[i];
                g_prev[i] = at[i] * g;
                if g != 0.0 {
                    let brow = &bt[i * d_in..(i + 1) * d_in];
                    let dbrow = &mut db[(t * n + i) * d_in..(t * n + i + 1) * d_in];
                    for j in 0..d_in {
                        dbrow[j] = g * xt[j];
                        dxt[j] += brow[j] * g;
                    }
                }
            }
            let mut dq = vec![0.0; n];
            let dyt = &dy[t * p..(t + 1) * p];
            for o in 0..p {
                let g = dyt[o];
                if g == 0.0 {
                    continue;
                }
                let crow = &ct[o * n..(o + 1) * n];
                let dcrow = &mut dc[(t * p + o) * n..(t * p + o + 1) * n];
                for i in 0..n {
                    dcrow[i] = g * qt[i];
                    dq[i] += crow[i] * g;
                }
                let drow = &dt[o * d_in..(o + 1) * d_in];
                let ddrow = &mut dd[(t * p + o) * d_in..(t * p + o + 1) * d_in];
                for j in 0..d_in {
                    ddrow[j] = g * xt[j];
                    dxt[j] += drow[j] * g;
                }
            }
            match self.mode {
                ScanMode::OutputOnly => {
                    gq = dq;
                    gr = g_prev;
                }
                _ => {
                    for i in 0..n {
                        dq[i] += g_prev[i];
                    }
                    gq = dq;
                    gr.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let dh0: Vec<f64> = gq.iter().zip(&gr).map(|(a, b)| a + b).collect();
        vec![da, db, dc, dd, dx, dh0]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-step matrices. `a` is either a length-`n` diagonal or a full `n x n`
/// matrix; only the oracle accepts the full form.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

impl StepParams {
    fn dense_a(&self) -> Tensor {
        if self.a.rank() == 2 {
            return self.a.clone();
        }
        let n = self.a.len();
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            m.data_mut()[i * n + i] = self.a.data()[i];
        }
        m
    }
}

/// Literal, unnormalized unroll with full matrices:
/// `y(t) = C_t h(t) + D_t x(t)`, `h(t+1) = A_t h(t) + B_t x(t)`.
pub fn dense_unroll_oracle(steps: &[StepParams], x: &Tensor, h0: &[f64]) -> Result<Tensor> {
    let (t_len, d_in) = x.dims2()?;
    if steps.len() != t_len {
        return Err(Error::dim("dense_unroll_oracle", &[steps.len()], &[t_len]));
    }
    let p = steps.first().map_or(0, |s| s.c.shape()[0]);
    let mut h = h0.to_vec();
    let mut out = Vec::with_capacity(t_len * p);
    for (t, s) in steps.iter().enumerate() {
        let xt = x.row(t);
        let n = h.len();
        for o in 0..p {
            let mut acc = 0.0;
            for i in 0..n {
                acc += s.c.at2(o, i) * h[i];
            }
            for j in 0..d_in {
                acc += s.d.at2(o, j) * xt[j];
            }
            out.push(acc);
        }
        let a = s.dense_a();
        let mut next = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                next[i] += a.at2(i, k) * h[k];
            }
            for j in 0..d_in {
                next[i] += s.b.at2(i, j) * xt[j];
            }
        }
        h = next;
    }
    Tensor::new(&[t_len, p], out)
}

/// Runs the fused scan on explicit per-step parameters (diagonal `a` only).
pub fn scan_frozen(steps: &[StepParams], x: &Tensor, h0: &[f64], mode: ScanMode) -> Result<Tensor> {
    let (t_len, _) = x.dims2()?;
    if steps.len() != t_len || t_len == 0 {
        return Err(Error::dim("scan_frozen", &[steps.len()], &[t_len]));
    }
    if steps.iter().any(|s| s.a.rank() != 1) {
        return Err(Error::Contract("scan_frozen needs diagonal A_t".into()));
    }
    let n = h0.len();
    let p = steps[0].c.shape()[0];
    let cat = |f: fn(&StepParams) -> &Tensor, shape: &[usize]| -> Result<Tensor> {
        Tensor::new(shape, steps.iter().flat_map(|s| f(s).data().to_vec()).collect())
    };
    let d_in = x.shape()[1];
    let mut tape = Tape::default();
    let a = tape.constant(cat(|s| &s.a, &[t_len, n])?)?;
    let b = tape.constant(cat(|s| &s.b, &[t_len, n * d_in])?)?;
    let c = tape.constant(cat(|s| &s.c, &[t_len, p * n])?)?;
    let d = tape.constant(cat(|s| &s.d, &[t_len, p * d_in])?)?;
    let xv = tape.constant(x.clone())?;
    let h = tape.constant(Tensor::new(&[n], h0.to_vec())?)?;
    let y = tape.selective_scan(a, b, c, d, xv, h, mode)?;
    Ok(tape.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectiveSsmConfig {
    /// State size.
    pub n: usize,
    pub d_in: usize,
    pub p: usize,
    pub conv_width: usize,
    pub generator_hidden: usize,
    pub mode: ScanMode,
}

impl SelectiveSsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_in == 0 || self.p == 0 || self.generator_hidden == 0 {
            return Err(Error::Config(format!("ssm sizes must be >= 1: {self:?}")));
        }
        if self.conv_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ssm conv_width must be odd, got {}",
                self.conv_width
            )));
        }
        Ok(())
    }
}

/// Two-layer perceptron `silu(z W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Generator {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        out: usize,
        out_std: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            w1: store.add_randn(format!("{prefix}.w1"), &[d_in, hidden], (1.0 / d_in as f64).sqrt(), rng),
            b1: store.add_zeros(format!("{prefix}.b1"), &[hidden]),
            w2: store.add_randn(format!("{prefix}.w2"), &[hidden, out], out_std, rng),
            b2: store.add_zeros(format!("{prefix}.b2"), &[out]),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let h = tape.matmul(z, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.silu(h);
        let o = tape.matmul(h, w2)?;
        tape.add(o, b2)
    }
}

/// Learnable selective SSM: local depthwise features plus four generators.
#[derive(Debug, Clone)]
pub struct SelectiveSsm {
    pub cfg: SelectiveSsmConfig,
    pub conv: ParamId,
    pub f_a: Generator,
    pub f_b: Generator,
    pub f_c: Generator,
    pub f_d: Generator,
}

impl SelectiveSsm {
    pub fn new(
        cfg: SelectiveSsmConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        cfg.validate()?;
        let SelectiveSsmConfig {
            n,
            d_in,
            p,
            conv_width: k,
            generator_hidden: h,
            ..
        } = cfg;
        // delta kernel plus noise so local features start close to the input
        let mut kernel = Tensor::randn(&[d_in, k], 0.1, rng);
        for c in 0..d_in {
            kernel.data_mut()[c * k + k / 2] += 1.0;
        }
        let conv = store.add(format!("{prefix}.conv"), kernel);
        let z = 2 * d_in;
        let hs = (h as f64).sqrt();
        let f_a = Generator::new(store, &format!("{prefix}.f_a"), z, h, n, 0.1 / hs, rng);
        // decay rates spread over (0.5, 0.95): squash(raw) ~ 1 / (1 + e^raw)
        {
            let b2 = store.value_mut(f_a.b2);
            for i in 0..n {
                let target = 0.5 + 0.45 * (i as f64 + 0.5) / n as f64;
                b2.data_mut()[i] = ((1.0 - target) / target).ln();
            }
            b2.normalize_dtype();
        }
        let f_b = Generator::new(store, &format!("{prefix}.f_b"), z, h, n * d_in, 1.0 / (hs * (d_in as f64).sqrt()), rng);
        let f_c = Generator::new(store, &format!("{prefix}.f_c"), z, h, p * n, 1.0 / (hs * (n as f64).sqrt()), rng);
        let f_d = Generator::new(store, &format!("{prefix}.f_d"), z, h, p * d_in, 1.0 / (hs * (d_in as f64).sqrt()), rng);
        Ok(Self {
            cfg,
            conv,
            f_a,
            f_b,
            f_c,
            f_d,
        })
    }

    /// Depthwise same-length convolution of `x: [T, d_in]`.
    pub fn local_features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.conv)?;
        tape.conv1d(x, w, ConvMode::Depthwise)
    }

    /// Generator outputs for all steps: `(a [T,n], b [T,n*d_in], c [T,p*n], d [T,p*d_in])`.
    pub fn generate(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<[Var; 4]> {
        let xt = self.local_features(tape, store, x)?;
        let z = tape.concat_cols(&[x, xt])?;
        let raw_a = self.f_a.forward(tape, store, z)?;
        let a = tape.unary(UnaryOp::Squash, raw_a);
        let b = self.f_b.forward(tape, store, z)?;
        let c = self.f_c.forward(tape, store, z)?;
        let d = self.f_d.forward(tape, store, z)?;
        Ok([a, b, c, d])
    }

    /// `x: [T, d_in] -> [T, p]` starting from `h0` (zero when `None`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h0: Option<Var>) -> Result<Var> {
        let (_, d_in) = tape.value(x).dims2()?;
        if d_in != self.cfg.d_in {
            return Err(Error::dim("selective_ssm", tape.shape(x), &[self.cfg.d_in]));
        }
        let [a, b, c, d] = self.generate(tape, store, x)?;
        let h0 = match h0 {
            Some(h) => h,
            None => tape.zeros(&[self.cfg.n]),
        };
        tape.selective_scan(a, b, c, d, x, h0, self.cfg.mode)
    }

    /// Materialized per-step parameters for inspection and tests.
    pub fn step_params(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<StepParams>> {
        let mut tape = Tape::new(store.dtype());
        let xv = tape.constant(x.to_dtype(store.dtype()))?;
        let [a, b, c, d] = self.generate(&mut tape, store, xv)?;
        let SelectiveSsmConfig { n, d_in, p, .. } = self.cfg;
        let t_len = x.shape()[0];
        let slice = |v: Var, t: usize, shape: &[usize]| -> Result<Tensor> {
            let len: usize = shape.iter().product();
            Tensor::new(shape, tape.value(v).data()[t * len..(t + 1) * len].to_vec())
        };
        (0..t_len)
            .map(|t| {
                Ok(StepParams {
                    a: slice(a, t, &[n])?,
                    b: slice(b, t, &[n, d_in])?,
                    c: slice(c, t, &[p, n])?,
                    d: slice(d, t, &[p, d_in])?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_steps(a: f64, b: f64, c: f64, d: f64, t: usize) -> Vec<StepParams> {
        let s = |v: f64, shape: &[usize]| Tensor::new(shape, vec![v]).unwrap();
        (0..t)
            .map(|_| StepParams {
                a: s(a, &[1]),
                b: s(b, &[1, 1]),
                c: s(c, &[1, 1]),
                d: s(d, &[1, 1]),
            })
            .collect()
    }

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn unit_delay() {
        let y = scan_frozen(&scalar_steps(0.0, 1.0, 1.0, 0.0, 3), &col(&[1., 2., 3.]), &[0.0], ScanMode::Raw).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn shifted_prefix_sum() {
        let y = scan_frozen(&scalar_steps(1.0, 1.0, 1.0, 0.0, 3), &col(&[1., 2., 3.]), &[0.0], ScanMode::Raw).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0]);
    }

    #[test]
    fn zero_input_zero_state_gives_zero() {
        for mode in [ScanMode::Raw, ScanMode::Feedback, ScanMode::OutputOnly] {
            let y = scan_frozen(&scalar_steps(0.7, 2.0, 3.0, 5.0, 4), &col(&[0.0; 4]), &[0.0], mode).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn oracle_h0_propagation() {
        // B = 0: y(t) = C A^t h0
        let y = dense_unroll_oracle(&scalar_steps(0.5, 0.0, 2.0, 0.0, 4), &col(&[9.0; 4]), &[1.0]).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0, 0.5, 0.25]);
    }

    #[test]
    fn non_finite_state_names_step() {
        let y = scan_frozen(&scalar_steps(1.0, 1.0, 1.0, 0.0, 3), &col(&[1.0, f64::INFINITY, 1.0]), &[0.0], ScanMode::Raw);
        assert!(matches!(y, Err(Error::NumericalStability { step: 1 })));
    }

    fn tiny(store: &mut ParamStore, rng: &mut SplitMix64) -> SelectiveSsm {
        let cfg = SelectiveSsmConfig {
            n: 3,
            d_in: 2,
            p: 2,
            conv_width: 3,
            generator_hidden: 4,
            mode: ScanMode::Feedback,
        };
        SelectiveSsm::new(cfg, store, "ssm", rng).unwrap()
    }

    #[test]
    fn zero_generators_give_constant_params() {
        let mut rng = SplitMix64::new(1);
        let mut store = ParamStore::new(Default::default());
        let ssm = tiny(&mut store, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let steps = ssm.step_params(&store, &x).unwrap();
        for s in &steps {
            // scalar oracle: margin + (1 - 2 margin) / (1 + e^0)
            let m = crate::tape::SQUASH_MARGIN;
            let expect = m + (1.0 - 2.0 * m) / (1.0 + 0f64.exp());
            assert!(s.a.data().iter().all(|&v| (v - expect).abs() < 1e-15));
            assert!(s.b.data().iter().chain(s.c.data()).chain(s.d.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decay_stays_in_unit_interval_for_wild_weights() {
        let mut rng = SplitMix64::new(2);
        let mut store = ParamStore::new(Default::default());
        let ssm = tiny(&mut store, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::randn(&shape, 3.0, &mut rng)).unwrap();
        }
        let x = Tensor::randn(&[16, 2], 1.0, &mut rng);
        for s in ssm.step_params(&store, &x).unwrap() {
            assert!(s.a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn decay_depends_on_input() {
        let mut rng = SplitMix64::new(3);
        let mut store = ParamStore::new(Default::default());
        let ssm = tiny(&mut store, &mut rng);
        let x = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let base = ssm.step_params(&store, &x).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[2 * 2] += 1e-3;
        let pert = ssm.step_params(&store, &x2).unwrap();
        let delta: f64 = base[2]
            .a
            .data()
            .iter()
            .zip(pert[2].a.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 0.0);
    }
}
