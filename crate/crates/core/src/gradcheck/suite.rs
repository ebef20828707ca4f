//! Finite-difference checks over every differentiable module at tiny sizes.

use serde::{Deserialize, Serialize};

use super::{grad_check, grad_check_params, sample_coords, GradCheckReport};
use crate::error::Result;
use crate::fd_branch::{FdBranch, FdBranchConfig, SsmSizes};
use crate::model::{loss_on_tape, FoSS, FoSSConfig};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::ssm::ScanMode;
use crate::tape::{BinaryOp, ConvMode, SpectralPart, Tape, UnaryOp, Var};
use crate::tensor::{DType, Tensor};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODULE_TOLERANCE: f64 = 1e-4;
const H_SMOOTH: f64 = 1e-4;
const H_LINEAR: f64 = 1e-2;
const H_MODULE: f64 = 3e-3;
/// Ladder convergence required of a module check point.
const SMOOTH_REL: f64 = MODULE_TOLERANCE;
const MAX_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst: (f64, f64),
    /// Sampled points discarded because a jump fell inside the stencil.
    pub rejected: usize,
}

impl SuiteEntry {
    pub const CSV_HEADER: &'static str = "check,points,rejected,max_rel_error,tolerance,pass,worst_analytic,worst_numeric";

    pub fn pass(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3e},{:.0e},{},{:.6e},{:.6e}",
            self.name,
            self.points,
            self.rejected,
            self.max_rel_error,
            self.tolerance,
            self.pass(),
            self.worst.0,
            self.worst.1
        )
    }
}

type Sampler = fn(&[usize], &mut SplitMix64) -> Tensor;

fn normal(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn away_from_zero(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let t = Tensor::uniform(shape, 0.1, 2.0, rng);
    let v = t.data().iter().map(|v| if rng.uniform() < 0.5 { -v } else { *v }).collect();
    Tensor::new(shape, v).expect("same shape")
}

fn decay(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(shape, 0.2, 0.9, rng)
}

/// `sum(w * y)` with fixed weights in `[0.5, 1.5]`.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::uniform(&shape, 0.5, 1.5, &mut SplitMix64::new(seed)))?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

struct Runner {
    points: usize,
    seed: u64,
    out: Vec<SuiteEntry>,
}

impl Runner {
    fn push(&mut self, name: &str, reports: &[GradCheckReport], rejected: usize, tol: f64) {
        let r = reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one point");
        self.out.push(SuiteEntry {
            name: name.to_string(),
            points: reports.len(),
            max_rel_error: r.max_rel_error,
            tolerance: tol,
            worst: (r.analytic[r.worst], r.numeric[r.worst]),
            rejected,
        });
    }

    /// Checks `probe(f(x) - f(x0))` at `points` sampled inputs.
    fn op(&mut self, name: &str, shape: &[usize], h: f64, sample: Sampler, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<()> {
        let seed = name.bytes().fold(self.seed, |s, b| s.wrapping_mul(31).wrapping_add(u64::from(b)));
        let mut rng = SplitMix64::new(seed);
        let mut reports = Vec::with_capacity(self.points);
        for k in 0..self.points {
            let point = sample(shape, &mut rng);
            let y0 = {
                let mut tp = Tape::new(DType::F64);
                let x = tp.constant(point.clone())?;
                let y = f(&mut tp, x)?;
                tp.value(y).clone()
            };
            let r = grad_check(
                |tp, x| {
                    let y = f(tp, x)?;
                    let base = tp.constant(y0.clone())?;
                    let dy = tp.sub(y, base)?;
                    probe(tp, dy, k as u64)
                },
                &point,
                h,
            )?;
            reports.push(r);
        }
        self.push(name, &reports, 0, PRIMITIVE_TOLERANCE);
        Ok(())
    }
}

/// Draws points until `wanted` have a converged step ladder on every
/// coordinate, up to [`MAX_ATTEMPTS`] times as many draws.
fn smooth_points(
    wanted: usize,
    mut draw: impl FnMut() -> Result<(GradCheckReport, GradCheckReport)>,
) -> Result<(Vec<GradCheckReport>, Vec<GradCheckReport>, usize)> {
    let (mut a, mut b, mut rejected) = (Vec::new(), Vec::new(), 0);
    while a.len() < wanted {
        let (x, y) = draw()?;
        if x.is_smooth(SMOOTH_REL) && y.is_smooth(SMOOTH_REL) || rejected >= MAX_ATTEMPTS * wanted {
            a.push(x);
            b.push(y);
        } else {
            rejected += 1;
        }
    }
    Ok((a, b, rejected))
}

fn randomize_affine(store: &mut ParamStore, rng: &mut SplitMix64) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let base = if name.ends_with(".gamma") {
            1.0
        } else if name.ends_with(".beta") || name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
            0.0
        } else {
            continue;
        };
        let shape = store.value(id).shape().to_vec();
        let v = Tensor::uniform(&shape, -0.3, 0.3, rng).data().iter().map(|v| base + v).collect();
        store.set_value(id, Tensor::new(&shape, v)?)?;
    }
    Ok(())
}

/// Configuration of the end-to-end check.
pub fn tiny_model() -> FoSSConfig {
    FoSSConfig {
        t_obs: 9,
        t_fut: 8,
        d_model: 8,
        k: 3,
        ssm: SsmSizes {
            n: 4,
            conv_width: 3,
            generator_hidden: 5,
        },
        evolve_ssm: SsmSizes {
            n: 2,
            conv_width: 3,
            generator_hidden: 3,
        },
        mlp_hidden: 6,
        ..FoSSConfig::default()
    }
}

fn primitives(r: &mut Runner) -> Result<()> {
    for op in [
        UnaryOp::Silu,
        UnaryOp::Sigmoid,
        UnaryOp::Squash,
        UnaryOp::Exp,
        UnaryOp::Cos,
        UnaryOp::Sin,
        UnaryOp::Square,
        UnaryOp::Abs,
    ] {
        let sample: Sampler = if op == UnaryOp::Abs { away_from_zero } else { normal };
        r.op(&format!("unary_{op:?}").to_lowercase(), &[3, 4], H_SMOOTH, sample, move |tp, x| Ok(tp.unary(op, x)))?;
    }
    let w = Tensor::randn(&[4, 3], 1.0, &mut SplitMix64::new(21));
    r.op("matmul", &[2, 4], H_SMOOTH, normal, |tp, x| {
        let w = tp.constant(w.clone())?;
        tp.matmul(x, w)
    })?;
    let row = Tensor::randn(&[3], 1.0, &mut SplitMix64::new(22));
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
        r.op(&format!("broadcast_{op:?}").to_lowercase(), &[2, 3], H_SMOOTH, normal, |tp, x| {
            let b = tp.constant(row.clone())?;
            tp.ew(op, x, b)
        })?;
    }
    r.op("layer_norm", &[3, 5], H_SMOOTH, normal, |tp, x| tp.layer_norm(x, None, None, 1e-5))?;
    r.op("softmax", &[3, 4], H_SMOOTH, normal, |tp, x| tp.softmax(x, 1))?;
    let wc = Tensor::randn(&[3, 2, 3], 1.0, &mut SplitMix64::new(4));
    r.op("conv1d", &[6, 2], H_SMOOTH, normal, |tp, x| {
        let w = tp.constant(wc.clone())?;
        tp.conv1d(x, w, ConvMode::Standard)
    })?;
    let wd = Tensor::randn(&[2, 5], 1.0, &mut SplitMix64::new(6));
    r.op("conv1d_depthwise", &[6, 2], H_SMOOTH, normal, |tp, x| {
        let w = tp.constant(wd.clone())?;
        tp.conv1d(x, w, ConvMode::Depthwise)
    })?;
    r.op("gather_rows", &[4, 2], H_SMOOTH, normal, |tp, x| tp.gather_rows(x, &[2, 0, 2, 3]))?;
    r.op("mean_rows", &[4, 3], H_SMOOTH, normal, |tp, x| tp.mean_rows(x))?;
    for part in [SpectralPart::Re, SpectralPart::Im] {
        r.op(&format!("dft_{part:?}").to_lowercase(), &[8, 3], H_LINEAR, normal, move |tp, x| tp.dft(x, part))?;
    }
    let im = Tensor::randn(&[8, 2], 1.0, &mut SplitMix64::new(8));
    r.op("idft_real", &[8, 2], H_LINEAR, normal, |tp, x| {
        let im = tp.constant(im.clone())?;
        tp.idft_real(x, im)
    })?;
    r.op("amplitude", &[4, 2], H_SMOOTH, normal, |tp, x| {
        let im = tp.silu(x);
        tp.amplitude(x, im)
    })?;
    let im_pos = Tensor::uniform(&[4, 2], 0.2, 1.0, &mut SplitMix64::new(10));
    r.op("phase", &[4, 2], H_SMOOTH, normal, |tp, x| {
        let im = tp.constant(im_pos.clone())?;
        tp.phase(x, im)
    })?;

    let (len, n, d_in, p) = (5, 3, 2, 2);
    let mut rng = SplitMix64::new(13);
    let base = [
        decay(&[len, n], &mut rng),
        normal(&[len, n * d_in], &mut rng),
        normal(&[len, p * n], &mut rng),
        normal(&[len, p * d_in], &mut rng),
        normal(&[len, d_in], &mut rng),
        normal(&[n], &mut rng),
    ];
    for mode in [ScanMode::Raw, ScanMode::Feedback, ScanMode::OutputOnly] {
        for slot in 0..6 {
            let shape = base[slot].shape().to_vec();
            let sample: Sampler = if slot == 0 { decay } else { normal };
            let base = &base;
            r.op(&format!("selective_scan_{mode:?}_{}", ["a", "b", "c", "d", "x", "h0"][slot]).to_lowercase(), &shape, H_SMOOTH, sample, move |tp, v| {
                let mut vars = Vec::with_capacity(6);
                for (i, b) in base.iter().enumerate() {
                    vars.push(if i == slot { v } else { tp.constant(b.clone())? });
                }
                tp.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], mode)
            })?;
        }
    }
    Ok(())
}

fn fd_branch(r: &mut Runner) -> Result<()> {
    let cfg = FdBranchConfig {
        d_model: 2,
        seq_len: 9,
        dwconv_width: 3,
        coarse: SsmSizes {
            n: 3,
            conv_width: 3,
            generator_hidden: 4,
        },
        evolve: SsmSizes {
            n: 2,
            conv_width: 3,
            generator_hidden: 3,
        },
        mode: ScanMode::Feedback,
        identity_helix: false,
        identity_fourier_ssm: false,
        skip_channel_scan: false,
        separate_streams: false,
    };
    let mut store = ParamStore::new(DType::F64);
    let mut rng = SplitMix64::new(r.seed ^ 17);
    let br = FdBranch::new(cfg, &mut store, "fd", &mut rng)?;
    randomize_affine(&mut store, &mut rng)?;
    let mut k = 0u64;
    let (inputs, params, rejected) = smooth_points(r.points, || {
        k += 1;
        let x = Tensor::randn(&[9, 2], 1.0, &mut rng);
        let loss = |tp: &mut Tape, s: &ParamStore, v: Var| -> Result<Var> {
            let f = br.forward(tp, s, v)?;
            probe(tp, f.f_freq, k)
        };
        let input = grad_check(|tp, v| loss(tp, &store, v), &x, H_MODULE)?;
        let coords = sample_coords(&store, 1, &mut rng);
        let param = grad_check_params(&store, &coords, H_MODULE, |tp, s| {
            let v = tp.constant(x.clone())?;
            loss(tp, s, v)
        })?;
        Ok((input, param))
    })?;
    r.push("fd_branch_input", &inputs, rejected, MODULE_TOLERANCE);
    r.push("fd_branch_params", &params, rejected, MODULE_TOLERANCE);
    Ok(())
}

fn model(r: &mut Runner) -> Result<()> {
    let (m, mut store) = FoSS::new(tiny_model(), DType::F64, r.seed ^ 30)?;
    let mut rng = SplitMix64::new(r.seed ^ 31);
    randomize_affine(&mut store, &mut rng)?;
    let (inputs, params, rejected) = smooth_points(r.points, || {
        let x = Tensor::randn(&[9, 2], 1.0, &mut rng);
        let y = Tensor::randn(&[8, 2], 1.0, &mut rng);
        let loss = |tp: &mut Tape, s: &ParamStore, v: Var| -> Result<Var> {
            let out = m.forward_tape(tp, s, v)?;
            let yv = tp.constant(y.clone())?;
            Ok(loss_on_tape(tp, out.prediction, yv, m.cfg.lambda)?.l_total)
        };
        let input = grad_check(|tp, v| loss(tp, &store, v), &x, H_MODULE)?;
        let coords = sample_coords(&store, 1, &mut rng);
        let param = grad_check_params(&store, &coords, H_MODULE, |tp, s| {
            let v = tp.constant(x.clone())?;
            loss(tp, s, v)
        })?;
        Ok((input, param))
    })?;
    r.push("model_loss_input", &inputs, rejected, MODULE_TOLERANCE);
    r.push("model_loss_params", &params, rejected, MODULE_TOLERANCE);
    Ok(())
}

/// Runs every check with `points` random points each. Layer-norm affine and
/// bias terms of the modules are randomized, so no pooled spectrum sits on a
/// phase jump.
pub fn run(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut r = Runner {
        points,
        seed,
        out: Vec::new(),
    };
    primitives(&mut r)?;
    fd_branch(&mut r)?;
    model(&mut r)?;
    Ok(r.out)
}
