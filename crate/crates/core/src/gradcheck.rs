//! Central finite-difference check of tape gradients.

pub mod suite;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

/// Floor of the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Gap between the chosen estimate and its coarser neighbour.
    pub spread: Vec<f64>,
}

impl GradCheckReport {
    /// Whether every coordinate's step ladder converged to within `rel` of
    /// its estimate; a jump inside the stencil breaks convergence.
    pub fn is_smooth(&self, rel: f64) -> bool {
        self.numeric
            .iter()
            .zip(&self.spread)
            .all(|(n, s)| *s <= rel * n.abs().max(DENOM_FLOOR))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn report(analytic: Vec<f64>, estimates: Vec<(f64, f64)>) -> GradCheckReport {
    let (numeric, spread): (Vec<f64>, Vec<f64>) = estimates.into_iter().unzip();
    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        spread,
    }
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new(DType::F64);
    let x = tape.input(point.clone())?;
    let loss = f(&mut tape, x)?;
    Ok(tape.value(loss).data()[0])
}

/// Fourth-order central difference from `f(x-2h), f(x-h), f(x+h), f(x+2h)`.
fn five_point(m2: f64, m1: f64, p1: f64, p2: f64, h: f64) -> f64 {
    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h)
}

/// Step multipliers around the nominal step.
const LADDER: [f64; 5] = [4.0, 2.0, 1.0, 0.5, 0.25];

/// Five-point estimates over [`LADDER`]; returns the estimate that agrees
/// best with its coarser neighbour, and that gap.
fn derivative(mut at: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<(f64, f64)> {
    let mut est = Vec::with_capacity(LADDER.len());
    for m in LADDER {
        let s = m * h;
        est.push(five_point(at(-2.0 * s)?, at(-s)?, at(s)?, at(2.0 * s)?, s));
    }
    let (mut best, mut gap) = (est[1], f64::INFINITY);
    for w in est.windows(2) {
        let g = (w[1] - w[0]).abs();
        if g < gap {
            (best, gap) = (w[1], g);
        }
    }
    Ok((best, gap))
}

/// Compares the tape gradient of `f` at `point` with five-point central
/// differences along every coordinate of `point`, with the step chosen per
/// coordinate from a ladder around `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let point = point.to_dtype(DType::F64);
    let mut tape = Tape::new(DType::F64);
    let x = tape.input(point.clone())?;
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);
    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        let mut at = |step: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + step;
            eval_scalar(&f, &probe)
        };
        let d = derivative(&mut at, h)?;
        probe.data_mut()[i] = orig;
        numeric.push(d);
    }
    Ok(report(analytic, numeric))
}

/// Same check over selected parameter coordinates `(param, flat index)`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new(store.dtype());
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?.params(&tape);
    let analytic = coords
        .iter()
        .map(|(id, i)| {
            grads
                .iter()
                .find(|(g, _)| g == id)
                .map_or(0.0, |(_, v)| v[*i])
        })
        .collect();
    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s.dtype());
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let orig = probe.value(id).data()[i];
        let mut at = |step: f64| -> Result<f64> {
            probe.value_mut(id).data_mut()[i] = orig + step;
            eval(&probe)
        };
        let d = derivative(&mut at, h)?;
        probe.value_mut(id).data_mut()[i] = orig;
        numeric.push(d);
    }
    Ok(report(analytic, numeric))
}

/// `count` coordinates per parameter tensor, drawn deterministically.
pub fn sample_coords(
    store: &ParamStore,
    count: usize,
    rng: &mut crate::rng::SplitMix64,
) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, p)| {
            let n = p.value.len();
            (0..count.min(n)).map(move |k| (id, k))
        })
        .map(|(id, _)| (id, rng.below(store.value(id).len())))
        .collect()
}
