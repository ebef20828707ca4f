//! Unitary discrete Fourier transform and polar decomposition.
//!
//! Complex sequences are carried as paired real tensors, so the transform is a
//! real-linear map and differentiates like any other tape operation. Both
//! directions scale by `1/sqrt(T)`.
//!
//! The direct transform indexes a twiddle table built for `k <= T/2` and
//! mirrored for the upper half, with exact values on the axes. Coefficients
//! `w` and `T - w` of a real input therefore come out as exact conjugates,
//! bit for bit, which keeps magnitude ties stable for the channel scan.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tape::{SpectralPart, Tape, Var, AMPLITUDE_GUARD};
use crate::tensor::Tensor;

/// Above this length the transform switches to a planned FFT.
pub const FAST_PATH_MIN_LEN: usize = 257;

/// Maximum imaginary residue accepted by [`dft_inverse`].
pub const RESIDUE_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSeq {
    pub re: Tensor,
    pub im: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolarSpectrum {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

/// `(cos, sin)` of `2*pi*k/T` for `k in 0..T`.
fn twiddles(t: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cos = vec![0.0; t];
    let mut sin = vec![0.0; t];
    for k in 0..=t / 2 {
        let (c, s) = if k == 0 {
            (1.0, 0.0)
        } else if 2 * k == t {
            (-1.0, 0.0)
        } else if 4 * k == t {
            (0.0, 1.0)
        } else {
            let a = 2.0 * PI * k as f64 / t as f64;
            (a.cos(), a.sin())
        };
        cos[k] = c;
        sin[k] = s;
        if k != 0 && 2 * k != t {
            cos[t - k] = c;
            sin[t - k] = -s;
        }
    }
    (cos, sin)
}

/// Unitary DFT of each column of a row-major `[t, d]` real array.
/// Returns `(re, im)`, both `[t, d]`.
pub fn real_dft_columns(x: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    if t >= FAST_PATH_MIN_LEN {
        fast_dft_columns(x, t, d)
    } else {
        naive_dft_columns(x, t, d)
    }
}

/// Direct `O(T^2)` summation.
pub fn naive_dft_columns(x: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let (cos, sin) = twiddles(t);
    let norm = 1.0 / (t as f64).sqrt();
    let mut re = vec![0.0; t * d];
    let mut im = vec![0.0; t * d];
    for w in 0..t {
        for ti in 0..t {
            let k = (ti * w) % t;
            let (c, s) = (cos[k], -sin[k]);
            let xrow = &x[ti * d..(ti + 1) * d];
            for j in 0..d {
                re[w * d + j] += xrow[j] * c;
                im[w * d + j] += xrow[j] * s;
            }
        }
    }
    re.iter_mut().for_each(|v| *v *= norm);
    im.iter_mut().for_each(|v| *v *= norm);
    (re, im)
}

fn fast_dft_columns(x: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    thread_local! {
        static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
    }
    let fft: Arc<dyn rustfft::Fft<f64>> = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(t));
    let norm = 1.0 / (t as f64).sqrt();
    let mut re = vec![0.0; t * d];
    let mut im = vec![0.0; t * d];
    let mut buf = vec![Complex64::new(0.0, 0.0); t];
    for j in 0..d {
        for (ti, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[ti * d + j], 0.0);
        }
        fft.process(&mut buf);
        for (w, b) in buf.iter().enumerate() {
            re[w * d + j] = b.re * norm;
            im[w * d + j] = b.im * norm;
        }
    }
    (re, im)
}

/// Two-argument arctangent in `(-pi, pi]`, pinned to 0 at vanishing modulus.
pub fn guarded_phase(re: f64, im: f64) -> f64 {
    if re.hypot(im) < AMPLITUDE_GUARD {
        return 0.0;
    }
    let p = im.atan2(re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

pub fn dft_forward(x: &Tensor) -> Result<ComplexSeq> {
    let (t, d) = x.dims2()?;
    let (re, im) = real_dft_columns(x.data(), t, d);
    Ok(ComplexSeq {
        re: Tensor::new(&[t, d], re)?,
        im: Tensor::new(&[t, d], im)?,
    })
}

/// Inverse transform of a spectrum that must come from a real signal.
///
/// Fails with [`Error::SpectralConsistency`] when the imaginary part of the
/// reconstruction exceeds [`RESIDUE_LIMIT`].
pub fn dft_inverse(f: &ComplexSeq) -> Result<Tensor> {
    let (t, d) = f.re.dims2()?;
    if f.im.shape() != f.re.shape() {
        return Err(Error::dim("dft_inverse", f.re.shape(), f.im.shape()));
    }
    // x = Re(DFT(re)) + Im(DFT(im)); residue = -Im(DFT(re)) + Re(DFT(im))
    let (rr, ri) = real_dft_columns(f.re.data(), t, d);
    let (ir, ii) = real_dft_columns(f.im.data(), t, d);
    let mut residue: f64 = 0.0;
    let mut out = Vec::with_capacity(t * d);
    for i in 0..t * d {
        out.push(rr[i] + ii[i]);
        residue = residue.max((ir[i] - ri[i]).abs());
    }
    if residue > RESIDUE_LIMIT {
        return Err(Error::SpectralConsistency {
            residue,
            limit: RESIDUE_LIMIT,
        });
    }
    Tensor::new(&[t, d], out)
}

pub fn to_polar(f: &ComplexSeq) -> Result<PolarSpectrum> {
    if f.im.shape() != f.re.shape() {
        return Err(Error::dim("to_polar", f.re.shape(), f.im.shape()));
    }
    let (amp, ph): (Vec<f64>, Vec<f64>) = f
        .re
        .data()
        .iter()
        .zip(f.im.data())
        .map(|(&r, &i)| (r.hypot(i), guarded_phase(r, i)))
        .unzip();
    Ok(PolarSpectrum {
        amplitude: Tensor::new(f.re.shape(), amp)?,
        phase: Tensor::new(f.re.shape(), ph)?,
    })
}

pub fn from_polar(p: &PolarSpectrum) -> Result<ComplexSeq> {
    if p.phase.shape() != p.amplitude.shape() {
        return Err(Error::dim("from_polar", p.amplitude.shape(), p.phase.shape()));
    }
    let (re, im): (Vec<f64>, Vec<f64>) = p
        .amplitude
        .data()
        .iter()
        .zip(p.phase.data())
        .map(|(&a, &ph)| (a * ph.cos(), a * ph.sin()))
        .unzip();
    Ok(ComplexSeq {
        re: Tensor::new(p.amplitude.shape(), re)?,
        im: Tensor::new(p.amplitude.shape(), im)?,
    })
}

/// Tape variants of the maps above.
pub mod ops {
    use super::*;

    pub fn dft_forward(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        Ok((tape.dft(x, SpectralPart::Re)?, tape.dft(x, SpectralPart::Im)?))
    }

    /// Real part of the inverse transform, i.e. the inverse of the Hermitian
    /// projection of `(re, im)`. Learned spectra are not conjugate symmetric,
    /// so no residue check is applied here.
    pub fn dft_inverse_real(tape: &mut Tape, re: Var, im: Var) -> Result<Var> {
        tape.idft_real(re, im)
    }

    pub fn to_polar(tape: &mut Tape, re: Var, im: Var) -> Result<(Var, Var)> {
        Ok((tape.amplitude(re, im)?, tape.phase(re, im)?))
    }

    pub fn from_polar(tape: &mut Tape, amp: Var, phase: Var) -> Result<(Var, Var)> {
        let c = tape.unary(crate::tape::UnaryOp::Cos, phase);
        let s = tape.unary(crate::tape::UnaryOp::Sin, phase);
        Ok((tape.mul(amp, c)?, tape.mul(amp, s)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn constant_sequence_is_dc_only() {
        let t = 9;
        let f = dft_forward(&col(&vec![2.5; t])).unwrap();
        assert!((f.re.data()[0] - 3.0 * 2.5).abs() < 1e-12);
        for w in 1..t {
            assert!(f.re.data()[w].abs() < 1e-12);
            assert!(f.im.data()[w].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let t = 16;
        let mut x = vec![0.0; t];
        x[0] = 1.0;
        let f = dft_forward(&col(&x)).unwrap();
        for w in 0..t {
            assert!((f.re.data()[w] - 0.25).abs() < 1e-15);
            assert_eq!(f.im.data()[w].abs(), 0.0);
        }
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let z = Tensor::zeros(&[5, 2]);
        let x = dft_inverse(&ComplexSeq { re: z.clone(), im: z }).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let re = Tensor::zeros(&[4, 1]);
        let mut im = Tensor::zeros(&[4, 1]);
        im.data_mut()[1] = 1.0;
        let err = dft_inverse(&ComplexSeq { re, im }).unwrap_err();
        assert!(matches!(err, Error::SpectralConsistency { .. }));
    }

    #[test]
    fn conjugate_pairs_are_bit_exact() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + 0.1 * i as f64).collect();
        let (re, im) = naive_dft_columns(&x, 12, 1);
        for w in 1..12 {
            assert_eq!(re[w].to_bits(), re[12 - w].to_bits());
            assert_eq!(im[w], -im[12 - w]);
        }
    }

    #[test]
    fn polar_examples() {
        let f = ComplexSeq {
            re: col(&[1.0, 0.0, -1.0, 0.0, -1.0]),
            im: col(&[0.0, 1.0, -1.0, 0.0, 0.0]),
        };
        let p = to_polar(&f).unwrap();
        let (a, ph) = (p.amplitude.data(), p.phase.data());
        assert_eq!((a[0], ph[0]), (1.0, 0.0));
        assert!((a[1] - 1.0).abs() < 1e-15 && (ph[1] - PI / 2.0).abs() < 1e-15);
        assert!((a[2] - 2f64.sqrt()).abs() < 1e-15);
        assert!((ph[2] + 3.0 * PI / 4.0).abs() < 1e-15);
        assert_eq!((a[3], ph[3]), (0.0, 0.0));
        // negative real axis lands on +pi, never -pi
        assert_eq!(ph[4], PI);
        assert_eq!(guarded_phase(-1.0, -0.0), PI);
    }

    #[test]
    fn zero_amplitude_maps_to_origin() {
        let p = PolarSpectrum {
            amplitude: col(&[0.0, 0.0]),
            phase: col(&[1.3, -2.0]),
        };
        let f = from_polar(&p).unwrap();
        assert!(f.re.data().iter().chain(f.im.data()).all(|v| v.abs() == 0.0));
    }

    #[test]
    fn fast_path_matches_direct_sum() {
        let t = 300;
        let x: Vec<f64> = (0..t * 2).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect();
        let (r1, i1) = naive_dft_columns(&x, t, 2);
        let (r2, i2) = fast_dft_columns(&x, t, 2);
        for k in 0..t * 2 {
            assert!((r1[k] - r2[k]).abs() < 1e-10);
            assert!((i1[k] - i2[k]).abs() < 1e-10);
        }
    }
}
