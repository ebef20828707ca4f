//! The full predictor and its dual-domain loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd_branch::{FdBranch, FdBranchConfig, SsmSizes};
use crate::nn::{Attention, Linear, Mlp, Norm};
use crate::params::{ParamId, ParamSpan, ParamStore};
use crate::rng::SplitMix64;
use crate::spectral;
use crate::ssm::{ScanMode, SelectiveSsm};
use crate::tape::{SpectralPart, Tape, UnaryOp, Var};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoSSConfig {
    pub t_obs: usize,
    pub t_fut: usize,
    /// Raw feature width (2 for planar positions).
    pub d_raw: usize,
    pub d_model: usize,
    /// Number of candidate futures.
    pub k: usize,
    /// Weight of the frequency-domain loss term.
    pub lambda: f64,
    pub heads: usize,
    /// Time-branch scan and helix-spectrum scan.
    pub ssm: SsmSizes,
    /// Channel-spectrum scan.
    pub evolve_ssm: SsmSizes,
    pub dwconv_width: usize,
    /// Hidden width of the trajectory and score heads.
    pub mlp_hidden: usize,
    pub disable_fd_branch: bool,
    pub identity_helix: bool,
    pub identity_fourier_ssm: bool,
    pub concat_mlp_fusion: bool,
    pub skip_channel_scan: bool,
    /// Feed the normalized scan state only to the readout.
    pub scan_output_only: bool,
    pub separate_streams: bool,
}

impl Default for FoSSConfig {
    fn default() -> Self {
        Self {
            t_obs: 20,
            t_fut: 30,
            d_raw: 2,
            d_model: 32,
            k: 6,
            lambda: 0.1,
            heads: 1,
            ssm: SsmSizes {
                n: 16,
                conv_width: 3,
                generator_hidden: 16,
            },
            evolve_ssm: SsmSizes {
                n: 4,
                conv_width: 3,
                generator_hidden: 8,
            },
            dwconv_width: 3,
            mlp_hidden: 64,
            disable_fd_branch: false,
            identity_helix: false,
            identity_fourier_ssm: false,
            concat_mlp_fusion: false,
            skip_channel_scan: false,
            scan_output_only: false,
            separate_streams: false,
        }
    }
}

impl FoSSConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.t_obs, self.t_fut, self.d_raw, self.d_model, self.k, self.heads, self.mlp_hidden];
        if sizes.contains(&0) {
            return Err(Error::Config(format!("model sizes must be >= 1: {self:?}")));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn scan_mode(&self) -> ScanMode {
        if self.scan_output_only {
            ScanMode::OutputOnly
        } else {
            ScanMode::Feedback
        }
    }

    pub fn fd_config(&self) -> FdBranchConfig {
        FdBranchConfig {
            d_model: self.d_model,
            seq_len: self.t_obs,
            dwconv_width: self.dwconv_width,
            coarse: self.ssm,
            evolve: self.evolve_ssm,
            mode: self.scan_mode(),
            identity_helix: self.identity_helix,
            identity_fourier_ssm: self.identity_fourier_ssm,
            skip_channel_scan: self.skip_channel_scan,
            separate_streams: self.separate_streams,
        }
    }
}

/// `K` candidate futures with their probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    /// `[K, T_fut, 2]`.
    pub trajectories: Tensor,
    pub probabilities: Vec<f64>,
}

impl CandidateSet {
    pub fn new(trajectories: Tensor, probabilities: Vec<f64>) -> Result<Self> {
        let shape = trajectories.shape();
        if shape.len() != 3 || shape[2] != 2 || shape[0] != probabilities.len() {
            return Err(Error::dim("candidate_set", shape, &[probabilities.len()]));
        }
        let total: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "candidate probabilities must be non-negative and sum to 1, got {probabilities:?}"
            )));
        }
        Ok(Self {
            trajectories,
            probabilities,
        })
    }

    pub fn k(&self) -> usize {
        self.probabilities.len()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.shape()[1]
    }

    /// Point `t` of candidate `k`.
    pub fn point(&self, k: usize, t: usize) -> [f64; 2] {
        let i = (k * self.horizon() + t) * 2;
        let d = self.trajectories.data();
        [d[i], d[i + 1]]
    }

    /// Index of the most probable candidate (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probabilities.iter().enumerate() {
            if *p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }

    /// The `k` most probable candidates, renormalized, in descending probability.
    pub fn top_k(&self, k: usize) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.k()).collect();
        idx.sort_by(|&a, &b| self.probabilities[b].total_cmp(&self.probabilities[a]).then(a.cmp(&b)));
        idx.truncate(k.min(self.k()).max(1));
        let t = self.horizon();
        let mut data = Vec::with_capacity(idx.len() * t * 2);
        for &i in &idx {
            data.extend_from_slice(&self.trajectories.data()[i * t * 2..(i + 1) * t * 2]);
        }
        let mass: f64 = idx.iter().map(|&i| self.probabilities[i]).sum();
        let probs = idx
            .iter()
            .map(|&i| if mass > 0.0 { self.probabilities[i] / mass } else { 1.0 / idx.len() as f64 })
            .collect();
        Self::new(Tensor::new(&[idx.len(), t, 2], data)?, probs)
    }

    /// Probability-weighted sum of the candidates, `[T_fut, 2]`.
    pub fn fuse(&self) -> Tensor {
        let t = self.horizon();
        let mut out = vec![0.0; t * 2];
        for (k, p) in self.probabilities.iter().enumerate() {
            let traj = &self.trajectories.data()[k * t * 2..(k + 1) * t * 2];
            for (o, v) in out.iter_mut().zip(traj) {
                *o += p * v;
            }
        }
        Tensor::from_parts(vec![t, 2], out, self.trajectories.dtype())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_time: f64,
    pub l_freq: f64,
    pub l_total: f64,
}

/// Loss terms as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_time: Var,
    pub l_freq: Var,
    pub l_total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_time: tape.value(self.l_time).data()[0],
            l_freq: tape.value(self.l_freq).data()[0],
            l_total: tape.value(self.l_total).data()[0],
        }
    }
}

/// Mean absolute error in time plus `lambda` times the mean over frequency
/// slots of `|d re| + |d im|` of the unitary spectrum of the error, taken per
/// output dimension over the horizon.
pub fn loss_on_tape(tape: &mut Tape, pred: Var, target: Var, lambda: f64) -> Result<LossVars> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim("loss", tape.shape(pred), tape.shape(target)));
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.unary(UnaryOp::Abs, diff);
    let l_time = tape.mean(abs);
    let re = tape.dft(diff, SpectralPart::Re)?;
    let im = tape.dft(diff, SpectralPart::Im)?;
    let re = tape.unary(UnaryOp::Abs, re);
    let im = tape.unary(UnaryOp::Abs, im);
    let parts = tape.add(re, im)?;
    let l_freq = tape.mean(parts);
    let weighted = tape.scale(l_freq, lambda);
    let l_total = tape.add(l_time, weighted)?;
    Ok(LossVars {
        l_time,
        l_freq,
        l_total,
    })
}

/// Value-level loss of a fused prediction against the ground truth.
pub fn loss(pred: &Tensor, target: &Tensor, lambda: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::new(DType::F64);
    let p = tape.constant(pred.to_dtype(DType::F64))?;
    let t = tape.constant(target.to_dtype(DType::F64))?;
    Ok(loss_on_tape(&mut tape, p, t, lambda)?.values(&tape))
}

#[derive(Debug, Clone)]
pub enum Fusion {
    /// `layer_norm(Y + attention(Y, F, F))`.
    CrossAttention { attn: Attention, norm: Norm },
    /// Two-layer perceptron over `[Y | F]`.
    ConcatMlp(Mlp),
}

impl Fusion {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, heads: usize, concat_mlp: bool, rng: &mut SplitMix64) -> Self {
        if concat_mlp {
            Fusion::ConcatMlp(Mlp::new(store, &format!("{prefix}.mlp"), 2 * d_model, d_model, d_model, rng))
        } else {
            Fusion::CrossAttention {
                attn: Attention::new(store, &format!("{prefix}.attn"), d_model, heads, rng),
                norm: Norm::new(store, &format!("{prefix}.norm"), d_model),
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y_time: Var, f_freq: Var) -> Result<Var> {
        match self {
            Fusion::CrossAttention { attn, norm } => {
                let a = attn.forward(tape, store, y_time, f_freq)?;
                let r = tape.add(y_time, a)?;
                norm.forward(tape, store, r)
            }
            Fusion::ConcatMlp(mlp) => {
                let cat = tape.concat_cols(&[y_time, f_freq])?;
                mlp.forward(tape, store, cat)
            }
        }
    }
}

/// Learnable-query decoder.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub queries: ParamId,
    pub attn: Attention,
    pub traj: Mlp,
    pub score: Mlp,
}

/// Forward outputs as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub z: Var,
    /// `[K, T_fut * 2]`.
    pub candidates: Var,
    /// `[1, K]`.
    pub probabilities: Var,
    /// `[T_fut, 2]`.
    pub prediction: Var,
}

#[derive(Debug, Clone)]
pub struct FoSS {
    pub cfg: FoSSConfig,
    pub embed: Linear,
    pub embed_norm: Norm,
    pub td: SelectiveSsm,
    pub fd: FdBranch,
    pub fusion: Fusion,
    pub decoder: Decoder,
    spans: Spans,
}

#[derive(Debug, Clone, Copy)]
struct Spans {
    embed: ParamSpan,
    td: ParamSpan,
    fusion: ParamSpan,
    decoder: ParamSpan,
}

impl FoSS {
    /// Builds the model and registers its parameters in a fresh store.
    pub fn new(cfg: FoSSConfig, dtype: DType, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new(dtype);
        let model = Self::build(cfg, &mut store, &mut SplitMix64::new(seed))?;
        Ok((model, store))
    }

    pub fn build(cfg: FoSSConfig, store: &mut ParamStore, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.d_model;
        let mode = cfg.scan_mode();

        let start = store.len();
        let embed = Linear::new(store, "embed", cfg.d_raw, c, true, rng);
        let bias = embed.b.expect("embed has a bias");
        store.set_value(bias, Tensor::randn(&[c], 1.0, rng))?;
        let embed_norm = Norm::new(store, "embed.norm", c);
        let embed_span = store.span_since(start);

        let start = store.len();
        let td = SelectiveSsm::new(cfg.ssm.with_io(c, c, mode), store, "td", rng)?;
        let td_span = store.span_since(start);

        let fd = FdBranch::new(cfg.fd_config(), store, "fd", rng)?;

        let start = store.len();
        let fusion = Fusion::new(store, "fuse", c, cfg.heads, cfg.concat_mlp_fusion, rng);
        let fusion_span = store.span_since(start);

        let start = store.len();
        let decoder = Decoder {
            queries: store.add_randn("dec.queries", &[cfg.k, c], 1.0 / (c as f64).sqrt(), rng),
            attn: Attention::new(store, "dec.attn", c, cfg.heads, rng),
            traj: Mlp::new(store, "dec.traj", c, cfg.mlp_hidden, cfg.t_fut * 2, rng),
            score: Mlp::new(store, "dec.score", c, cfg.mlp_hidden, 1, rng),
        };
        let decoder_span = store.span_since(start);

        Ok(Self {
            cfg,
            embed,
            embed_norm,
            td,
            fd,
            fusion,
            decoder,
            spans: Spans {
                embed: embed_span,
                td: td_span,
                fusion: fusion_span,
                decoder: decoder_span,
            },
        })
    }

    /// Scalar parameters on the active forward path.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        let s = self.spans;
        let fd = if self.cfg.disable_fd_branch {
            0
        } else {
            self.fd.param_count(store)
        };
        s.embed.scalar_count(store) + s.td.scalar_count(store) + fd + s.fusion.scalar_count(store) + s.decoder.scalar_count(store)
    }

    /// Parameters of the frequency branch.
    pub fn fd_span(&self) -> ParamSpan {
        self.fd.span()
    }

    /// Per-step linear map and layer norm: `[T_obs, d_raw] -> [T_obs, C]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.embed.forward(tape, store, x)?;
        self.embed_norm.forward(tape, store, h)
    }

    pub fn td_branch(&self, tape: &mut Tape, store: &ParamStore, e: Var) -> Result<Var> {
        self.td.forward(tape, store, e, None)
    }

    pub fn fd_branch(&self, tape: &mut Tape, store: &ParamStore, e: Var) -> Result<Var> {
        if self.cfg.disable_fd_branch {
            let shape = tape.shape(e).to_vec();
            return Ok(tape.zeros(&shape));
        }
        Ok(self.fd.forward(tape, store, e)?.f_freq)
    }

    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, y_time: Var, f_freq: Var) -> Result<Var> {
        if tape.shape(y_time) != tape.shape(f_freq) {
            return Err(Error::dim("fuse", tape.shape(y_time), tape.shape(f_freq)));
        }
        self.fusion.forward(tape, store, y_time, f_freq)
    }

    /// `(candidates [K, T_fut*2], probabilities [1, K])`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let d = &self.decoder;
        let q = tape.param(store, d.queries)?;
        let z_attn = d.attn.forward(tape, store, q, z)?;
        let cands = d.traj.forward(tape, store, z_attn)?;
        let logits = d.score.forward(tape, store, z_attn)?;
        let logits = tape.transpose(logits)?;
        let probs = tape.softmax(logits, 1)?;
        Ok((cands, probs))
    }

    /// Probability-weighted candidate sum, `[T_fut, 2]`.
    pub fn fuse_candidates(&self, tape: &mut Tape, cands: Var, probs: Var) -> Result<Var> {
        let y = tape.matmul(probs, cands)?;
        tape.reshape(y, &[self.cfg.t_fut, 2])
    }

    /// Full forward pass on `x: [T_obs, d_raw]` in the model frame.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<ForwardVars> {
        let shape = tape.shape(x);
        if shape != [self.cfg.t_obs, self.cfg.d_raw] {
            return Err(Error::dim("forward", shape, &[self.cfg.t_obs, self.cfg.d_raw]));
        }
        let e = self.embed(tape, store, x)?;
        let y_time = self.td_branch(tape, store, e)?;
        let f_freq = self.fd_branch(tape, store, e)?;
        let z = self.fuse(tape, store, y_time, f_freq)?;
        let (candidates, probabilities) = self.decode(tape, store, z)?;
        let prediction = self.fuse_candidates(tape, candidates, probabilities)?;
        Ok(ForwardVars {
            z,
            candidates,
            probabilities,
            prediction,
        })
    }

    /// Forward pass plus loss against `y: [T_fut, 2]`.
    pub fn loss_tape(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, y: &Tensor) -> Result<(ForwardVars, LossVars)> {
        let xv = tape.constant(x.to_dtype(store.dtype()))?;
        let yv = tape.constant(y.to_dtype(store.dtype()))?;
        let out = self.forward_tape(tape, store, xv)?;
        let l = loss_on_tape(tape, out.prediction, yv, self.cfg.lambda)?;
        Ok((out, l))
    }

    /// Candidates and fused prediction for one input, in the model frame.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(CandidateSet, Tensor)> {
        let mut tape = Tape::new(store.dtype());
        let xv = tape.constant(x.to_dtype(store.dtype()))?;
        let out = self.forward_tape(&mut tape, store, xv)?;
        let c = tape.value(out.candidates).reshape(&[self.cfg.k, self.cfg.t_fut, 2])?;
        let probs = tape.value(out.probabilities).data().to_vec();
        let cands = CandidateSet::new(c, probs)?;
        Ok((cands, tape.value(out.prediction).clone()))
    }
}

/// Value-level unitary spectrum of a `[T, d]` signal, for inspection.
pub fn spectrum(x: &Tensor) -> Result<spectral::ComplexSeq> {
    spectral::dft_forward(x)
}
