//! Frequency branch: a spatial spectral pass over the helix-ordered spectrum
//! of every channel, and a channel spectral pass over the pooled feature,
//! fused by concatenation and a linear projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::helix::{channel_scan_order_from, HelixPermutation};
use crate::nn::{Linear, Norm};
use crate::params::{ParamId, ParamSpan, ParamStore};
use crate::rng::SplitMix64;
use crate::spectral::ops;
use crate::ssm::{ScanMode, SelectiveSsm, SelectiveSsmConfig};
use crate::tape::{ConvMode, Tape, Var};
use crate::tensor::Tensor;

/// Sizes of one learnable scan; input and output widths follow from its position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsmSizes {
    pub n: usize,
    pub conv_width: usize,
    pub generator_hidden: usize,
}

impl SsmSizes {
    pub fn with_io(self, d_in: usize, p: usize, mode: ScanMode) -> SelectiveSsmConfig {
        SelectiveSsmConfig {
            n: self.n,
            d_in,
            p,
            conv_width: self.conv_width,
            generator_hidden: self.generator_hidden,
            mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FdBranchConfig {
    /// Channel width `C`.
    pub d_model: usize,
    /// Sequence length `L`.
    pub seq_len: usize,
    pub dwconv_width: usize,
    /// Scan over the helix-ordered spectrum.
    pub coarse: SsmSizes,
    /// Scan over the magnitude-ordered channel spectrum.
    pub evolve: SsmSizes,
    pub mode: ScanMode,
    /// Keep the spectrum in natural frequency order.
    pub identity_helix: bool,
    /// Skip both spectral processing stages.
    pub identity_fourier_ssm: bool,
    /// Skip only the channel scan.
    pub skip_channel_scan: bool,
    /// Separate stacks for amplitude and phase instead of one shared stack.
    pub separate_streams: bool,
}

impl FdBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.seq_len == 0 {
            return Err(Error::Config(format!("fd branch sizes must be >= 1: {self:?}")));
        }
        if self.dwconv_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "dwconv_width must be odd, got {}",
                self.dwconv_width
            )));
        }
        Ok(())
    }
}

/// Depthwise-separable convolution, SiLU, selective scan, layer norm.
#[derive(Debug, Clone)]
pub struct SpectralStack {
    pub dwconv: ParamId,
    pub pointwise: Linear,
    pub ssm: SelectiveSsm,
    pub norm: Norm,
    pub width: usize,
}

impl SpectralStack {
    fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        k: usize,
        sizes: SsmSizes,
        mode: ScanMode,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut kernel = Tensor::randn(&[width, k], 0.1, rng);
        for c in 0..width {
            kernel.data_mut()[c * k + k / 2] += 1.0;
        }
        Ok(Self {
            dwconv: store.add(format!("{name}.dwconv"), kernel),
            pointwise: Linear::new(store, &format!("{name}.pointwise"), width, width, true, rng),
            ssm: SelectiveSsm::new(sizes.with_io(width, width, mode), store, &format!("{name}.ssm"), rng)?,
            norm: Norm::new(store, &format!("{name}.norm"), width),
            width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.dwconv)?;
        let h = tape.conv1d(x, w, ConvMode::Depthwise)?;
        let h = self.pointwise.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.ssm.forward(tape, store, h, None)?;
        self.norm.forward(tape, store, h)
    }
}

/// Branch outputs, all `[L, C]`.
#[derive(Debug, Clone, Copy)]
pub struct FdFeatures {
    pub f_l: Var,
    pub f_f: Var,
    pub f_enhance: Var,
    pub f_freq: Var,
}

#[derive(Debug, Clone)]
pub struct FdBranch {
    pub cfg: FdBranchConfig,
    pub helix: HelixPermutation,
    pub norm_in: Norm,
    /// One shared stack over `[amplitude | phase]`, or one per stream.
    pub streams: Vec<SpectralStack>,
    pub evolve: SelectiveSsm,
    pub proj: Linear,
    span: ParamSpan,
}

impl FdBranch {
    pub fn new(cfg: FdBranchConfig, store: &mut ParamStore, prefix: &str, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let start = store.len();
        let c = cfg.d_model;
        let helix = if cfg.identity_helix {
            HelixPermutation::identity(cfg.seq_len)
        } else {
            HelixPermutation::new(cfg.seq_len)?
        };
        let norm_in = Norm::new(store, &format!("{prefix}.norm_in"), c);
        let streams = if cfg.separate_streams {
            vec![
                SpectralStack::new(store, &format!("{prefix}.amp"), c, cfg.dwconv_width, cfg.coarse, cfg.mode, rng)?,
                SpectralStack::new(store, &format!("{prefix}.phase"), c, cfg.dwconv_width, cfg.coarse, cfg.mode, rng)?,
            ]
        } else {
            vec![SpectralStack::new(
                store,
                &format!("{prefix}.polar"),
                2 * c,
                cfg.dwconv_width,
                cfg.coarse,
                cfg.mode,
                rng,
            )?]
        };
        let evolve = SelectiveSsm::new(cfg.evolve.with_io(2, 2, cfg.mode), store, &format!("{prefix}.evolve"), rng)?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), 2 * c, c, true, rng);
        Ok(Self {
            cfg,
            helix,
            norm_in,
            streams,
            evolve,
            proj,
            span: store.span_since(start),
        })
    }

    pub fn span(&self) -> ParamSpan {
        self.span
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.span.scalar_count(store) + self.helix.param_count()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape != [self.cfg.seq_len, self.cfg.d_model] {
            return Err(Error::dim("fd_branch", shape, &[self.cfg.seq_len, self.cfg.d_model]));
        }
        Ok(())
    }

    /// Processes the helix-ordered amplitude and phase (`[L, C]` each).
    fn process_polar(&self, tape: &mut Tape, store: &ParamStore, amp: Var, phase: Var) -> Result<(Var, Var)> {
        if self.cfg.identity_fourier_ssm {
            return Ok((amp, phase));
        }
        match self.streams.as_slice() {
            [shared] => {
                let cat = tape.concat_cols(&[amp, phase])?;
                let out = shared.forward(tape, store, cat)?;
                let c = self.cfg.d_model;
                Ok((tape.slice_cols(out, 0, c)?, tape.slice_cols(out, c, c)?))
            }
            [a, p] => Ok((a.forward(tape, store, amp)?, p.forward(tape, store, phase)?)),
            _ => unreachable!("one or two spectral stacks"),
        }
    }

    /// Spatial spectral interaction; `f_l: [L, C] -> F_f: [L, C]`.
    pub fn coarse2fine(&self, tape: &mut Tape, store: &ParamStore, f_l: Var) -> Result<Var> {
        self.check_input(tape, f_l)?;
        let (re, im) = ops::dft_forward(tape, f_l)?;
        let (amp, phase) = ops::to_polar(tape, re, im)?;
        let amp = self.helix.apply_var(tape, amp)?;
        let phase = self.helix.apply_var(tape, phase)?;
        let (amp, phase) = self.process_polar(tape, store, amp, phase)?;
        let amp = self.helix.invert_apply_var(tape, amp)?;
        let phase = self.helix.invert_apply_var(tape, phase)?;
        let (re, im) = ops::from_polar(tape, amp, phase)?;
        let back = ops::dft_inverse_real(tape, re, im)?;
        let gate = tape.silu(f_l);
        tape.mul(back, gate)
    }

    /// Channel spectral evolution; `f_in: [L, C] -> F_enhance: [L, C]`.
    pub fn specevolve(&self, tape: &mut Tape, store: &ParamStore, f_in: Var) -> Result<Var> {
        self.check_input(tape, f_in)?;
        let g = tape.mean_rows(f_in)?;
        let g_col = tape.transpose(g)?;
        let (re, im) = ops::dft_forward(tape, g_col)?;
        let (mut amp, mut phase) = ops::to_polar(tape, re, im)?;
        if !(self.cfg.identity_fourier_ssm || self.cfg.skip_channel_scan) {
            let order = channel_scan_order_from(tape.value(re).data(), tape.value(im).data())?;
            let a = tape.gather_rows(amp, &order.order)?;
            let p = tape.gather_rows(phase, &order.order)?;
            let seq = tape.concat_cols(&[a, p])?;
            let y = self.evolve.forward(tape, store, seq, None)?;
            let y = tape.gather_rows(y, &order.inverse())?;
            amp = tape.slice_cols(y, 0, 1)?;
            phase = tape.slice_cols(y, 1, 1)?;
        }
        let (re, im) = ops::from_polar(tape, amp, phase)?;
        let processed = ops::dft_inverse_real(tape, re, im)?;
        let processed = tape.transpose(processed)?;
        let gate = tape.silu(g);
        let f_a = tape.mul(processed, gate)?;
        tape.mul(f_in, f_a)
    }

    /// `x: [L, C]` (already embedded) to all branch features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<FdFeatures> {
        self.check_input(tape, x)?;
        let f_l = self.norm_in.forward(tape, store, x)?;
        let f_f = self.coarse2fine(tape, store, f_l)?;
        let f_enhance = self.specevolve(tape, store, f_l)?;
        let cat = tape.concat_cols(&[f_f, f_enhance])?;
        let f_freq = self.proj.forward(tape, store, cat)?;
        Ok(FdFeatures {
            f_l,
            f_f,
            f_enhance,
            f_freq,
        })
    }
}
