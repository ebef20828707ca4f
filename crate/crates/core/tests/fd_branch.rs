use std::f64::consts::PI;

use foss_core::fd_branch::{FdBranch, FdBranchConfig, SpectralStack, SsmSizes};
use foss_core::gradcheck::{grad_check, grad_check_params, sample_coords};
use foss_core::helix::HelixPermutation;
use foss_core::nn::{Linear, Norm};
use foss_core::rng::SplitMix64;
use foss_core::ssm::{dense_unroll_oracle, ScanMode, SelectiveSsm};
use foss_core::{DType, ParamStore, Tape, Tensor};

fn config(l: usize, c: usize, mode: ScanMode) -> FdBranchConfig {
    FdBranchConfig {
        d_model: c,
        seq_len: l,
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
        mode,
        identity_helix: false,
        identity_fourier_ssm: false,
        skip_channel_scan: false,
        separate_streams: false,
    }
}

fn build(cfg: FdBranchConfig, seed: u64) -> (FdBranch, ParamStore) {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = SplitMix64::new(seed);
    let branch = FdBranch::new(cfg, &mut store, "fd", &mut rng).unwrap();
    // Randomize affine and bias terms so the oracle exercises them.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b") {
            let shape = store.value(id).shape().to_vec();
            let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            let noise = Tensor::uniform(&shape, -0.3, 0.3, &mut rng);
            let v = noise.data().iter().map(|v| base + v).collect();
            store.set_value(id, Tensor::new(&shape, v).unwrap()).unwrap();
        }
    }
    (branch, store)
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|v| f(*v)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()).unwrap()
}

fn layer_norm(x: &Tensor, g: &[f64], b: &[f64]) -> Tensor {
    let (rows, cols) = x.dims2().unwrap();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + Norm::EPS).sqrt();
        for c in 0..cols {
            out.push((row[c] - mean) * inv * g[c] + b[c]);
        }
    }
    Tensor::new(&[rows, cols], out).unwrap()
}

fn norm(n: &Norm, store: &ParamStore, x: &Tensor) -> Tensor {
    layer_norm(x, store.value(n.gamma).data(), store.value(n.beta).data())
}

fn linear(l: &Linear, store: &ParamStore, x: &Tensor) -> Tensor {
    let (rows, d_in) = x.dims2().unwrap();
    let w = store.value(l.w);
    let mut out = vec![0.0; rows * l.d_out];
    for r in 0..rows {
        for o in 0..l.d_out {
            let mut acc = l.b.map_or(0.0, |b| store.value(b).data()[o]);
            for i in 0..d_in {
                acc += x.at2(r, i) * w.at2(i, o);
            }
            out[r * l.d_out + o] = acc;
        }
    }
    Tensor::new(&[rows, l.d_out], out).unwrap()
}

fn depthwise(x: &Tensor, w: &Tensor) -> Tensor {
    let (len, ch) = x.dims2().unwrap();
    let k = w.shape()[1];
    let mut out = vec![0.0; len * ch];
    for t in 0..len {
        for c in 0..ch {
            for j in 0..k {
                let src = t as isize + j as isize - (k / 2) as isize;
                if (0..len as isize).contains(&src) {
                    out[t * ch + c] += w.at2(c, j) * x.at2(src as usize, c);
                }
            }
        }
    }
    Tensor::new(&[len, ch], out).unwrap()
}

fn scan(ssm: &SelectiveSsm, store: &ParamStore, x: &Tensor) -> Tensor {
    let steps = ssm.step_params(store, x).unwrap();
    dense_unroll_oracle(&steps, x, &vec![0.0; ssm.cfg.n]).unwrap()
}

fn stack(s: &SpectralStack, store: &ParamStore, x: &Tensor) -> Tensor {
    let h = depthwise(x, store.value(s.dwconv));
    let h = map(&linear(&s.pointwise, store, &h), silu);
    norm(&s.norm, store, &scan(&s.ssm, store, &h))
}

/// `(cos, sin)` of `2 pi k / n`, exact at quarter turns so that real
/// coefficients keep a zero imaginary part.
fn turn(k: usize, n: usize) -> (f64, f64) {
    let k = k % n;
    match (4 * k) % n {
        0 => [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][4 * k / n],
        _ => {
            let a = 2.0 * PI * k as f64 / n as f64;
            (a.cos(), a.sin())
        }
    }
}

/// Per-column complex spectrum with freshly evaluated angles.
fn dft(x: &Tensor) -> (Tensor, Tensor) {
    let (len, ch) = x.dims2().unwrap();
    let s = 1.0 / (len as f64).sqrt();
    let mut re = vec![0.0; len * ch];
    let mut im = vec![0.0; len * ch];
    for w in 0..len {
        for t in 0..len {
            let (cos, sin) = turn(w * t, len);
            for c in 0..ch {
                re[w * ch + c] += s * x.at2(t, c) * cos;
                im[w * ch + c] -= s * x.at2(t, c) * sin;
            }
        }
    }
    (Tensor::new(&[len, ch], re).unwrap(), Tensor::new(&[len, ch], im).unwrap())
}

/// Real part of the inverse transform.
fn idft_real(re: &Tensor, im: &Tensor) -> Tensor {
    let (len, ch) = re.dims2().unwrap();
    let s = 1.0 / (len as f64).sqrt();
    let mut out = vec![0.0; len * ch];
    for t in 0..len {
        for w in 0..len {
            let (cos, sin) = turn(w * t, len);
            for c in 0..ch {
                out[t * ch + c] += s * (re.at2(w, c) * cos - im.at2(w, c) * sin);
            }
        }
    }
    Tensor::new(&[len, ch], out).unwrap()
}

fn polar(re: &Tensor, im: &Tensor) -> (Tensor, Tensor) {
    let amp = zip(re, im, f64::hypot);
    let phase = zip(re, im, |r, i| {
        if r.hypot(i) < 1e-12 {
            0.0
        } else {
            let p = i.atan2(r);
            if p == -PI {
                PI
            } else {
                p
            }
        }
    });
    (amp, phase)
}

fn cartesian(amp: &Tensor, phase: &Tensor) -> (Tensor, Tensor) {
    (zip(amp, phase, |a, p| a * p.cos()), zip(amp, phase, |a, p| a * p.sin()))
}

fn cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (rows, _) = x.dims2().unwrap();
    let data = (0..rows).flat_map(|r| x.row(r)[start..start + len].to_vec()).collect();
    Tensor::new(&[rows, len], data).unwrap()
}

fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let (rows, _) = a.dims2().unwrap();
    let data = (0..rows).flat_map(|r| [a.row(r), b.row(r)].concat()).collect();
    Tensor::new(&[rows, a.shape()[1] + b.shape()[1]], data).unwrap()
}

fn rows(x: &Tensor, index: &[usize]) -> Tensor {
    let data = index.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    Tensor::new(&[index.len(), x.shape()[1]], data).unwrap()
}

fn oracle_coarse2fine(br: &FdBranch, store: &ParamStore, f_l: &Tensor) -> Tensor {
    let c = br.cfg.d_model;
    let helix = HelixPermutation::new(br.cfg.seq_len).unwrap();
    let (re, im) = dft(f_l);
    let (amp, phase) = polar(&re, &im);
    let amp = rows(&amp, helix.pi());
    let phase = rows(&phase, helix.pi());
    let out = stack(&br.streams[0], store, &hcat(&amp, &phase));
    let amp = rows(&cols(&out, 0, c), helix.pi_inv());
    let phase = rows(&cols(&out, c, c), helix.pi_inv());
    let (re, im) = cartesian(&amp, &phase);
    zip(&idft_real(&re, &im), f_l, |v, g| v * silu(g))
}

fn oracle_specevolve(br: &FdBranch, store: &ParamStore, f_in: &Tensor) -> Tensor {
    let (len, c) = f_in.dims2().unwrap();
    let g: Vec<f64> = (0..c).map(|j| (0..len).map(|t| f_in.at2(t, j)).sum::<f64>() / len as f64).collect();
    let g_col = Tensor::new(&[c, 1], g.clone()).unwrap();
    let (re, im) = dft(&g_col);
    let (amp, phase) = polar(&re, &im);
    // Conjugate pairs tie in magnitude; compare at a coarse resolution so
    // last-bit differences of the oracle spectrum keep the index tie-break.
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by_key(|&j| ((amp.data()[j] * 1e9).round() as i64, j));
    let mut inverse = vec![0; c];
    for (s, &j) in order.iter().enumerate() {
        inverse[j] = s;
    }
    let seq = hcat(&rows(&amp, &order), &rows(&phase, &order));
    let y = rows(&scan(&br.evolve, store, &seq), &inverse);
    let (re, im) = cartesian(&cols(&y, 0, 1), &cols(&y, 1, 1));
    let processed = idft_real(&re, &im);
    let f_a: Vec<f64> = (0..c).map(|j| processed.data()[j] * silu(g[j])).collect();
    let data = (0..len * c).map(|i| f_in.data()[i] * f_a[i % c]).collect();
    Tensor::new(&[len, c], data).unwrap()
}

fn run<F>(store: &ParamStore, x: &Tensor, f: F) -> Tensor
where
    F: FnOnce(&mut Tape, foss_core::Var) -> foss_core::Result<foss_core::Var>,
{
    let mut tape = Tape::new(store.dtype());
    let xv = tape.constant(x.clone()).unwrap();
    let y = f(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

#[test]
fn coarse2fine_matches_scripted_oracle() {
    let (br, store) = build(config(9, 2, ScanMode::Raw), 1);
    let x = Tensor::randn(&[9, 2], 1.0, &mut SplitMix64::new(2));
    let got = run(&store, &x, |tp, v| br.coarse2fine(tp, &store, v));
    let want = oracle_coarse2fine(&br, &store, &x);
    assert!(got.max_abs_diff(&want) < 1e-9, "{}", got.max_abs_diff(&want));
}

#[test]
fn specevolve_matches_scripted_oracle() {
    let (br, store) = build(config(8, 8, ScanMode::Raw), 3);
    let x = Tensor::randn(&[8, 8], 1.0, &mut SplitMix64::new(4));
    let got = run(&store, &x, |tp, v| br.specevolve(tp, &store, v));
    let want = oracle_specevolve(&br, &store, &x);
    assert!(got.max_abs_diff(&want) < 1e-9, "{}", got.max_abs_diff(&want));
}

#[test]
fn branch_matches_scripted_oracle() {
    for (l, c, seed) in [(9, 2, 5), (8, 8, 6)] {
        let (br, store) = build(config(l, c, ScanMode::Raw), seed);
        let x = Tensor::randn(&[l, c], 1.0, &mut SplitMix64::new(seed + 100));
        let got = run(&store, &x, |tp, v| Ok(br.forward(tp, &store, v)?.f_freq));
        let f_l = norm(&br.norm_in, &store, &x);
        let cat = hcat(&oracle_coarse2fine(&br, &store, &f_l), &oracle_specevolve(&br, &store, &f_l));
        let want = linear(&br.proj, &store, &cat);
        assert!(got.max_abs_diff(&want) < 1e-9, "L={l} C={c}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn identity_processing_is_a_gated_roundtrip() {
    let mut cfg = config(11, 3, ScanMode::Feedback);
    cfg.identity_fourier_ssm = true;
    let (br, store) = build(cfg, 7);
    let x = Tensor::randn(&[11, 3], 1.0, &mut SplitMix64::new(8));
    let f_f = run(&store, &x, |tp, v| br.coarse2fine(tp, &store, v));
    assert!(f_f.max_abs_diff(&map(&x, |v| v * silu(v))) < 1e-8);

    let f_e = run(&store, &x, |tp, v| br.specevolve(tp, &store, v));
    let g: Vec<f64> = (0..3).map(|j| (0..11).map(|t| x.at2(t, j)).sum::<f64>() / 11.0).collect();
    let want = Tensor::new(&[11, 3], (0..33).map(|i| x.data()[i] * g[i % 3] * silu(g[i % 3])).collect()).unwrap();
    assert!(f_e.max_abs_diff(&want) < 1e-8);
}

#[test]
fn skipping_channel_scan_leaves_coarse_path() {
    let mut cfg = config(7, 4, ScanMode::Feedback);
    cfg.skip_channel_scan = true;
    let (br, store) = build(cfg, 9);
    let x = Tensor::randn(&[7, 4], 1.0, &mut SplitMix64::new(10));
    let f_e = run(&store, &x, |tp, v| br.specevolve(tp, &store, v));
    let g: Vec<f64> = (0..4).map(|j| (0..7).map(|t| x.at2(t, j)).sum::<f64>() / 7.0).collect();
    let want = Tensor::new(&[7, 4], (0..28).map(|i| x.data()[i] * g[i % 4] * silu(g[i % 4])).collect()).unwrap();
    assert!(f_e.max_abs_diff(&want) < 1e-8);

    cfg.skip_channel_scan = false;
    let (full, store2) = build(cfg, 9);
    let f_c = run(&store2, &x, |tp, v| full.coarse2fine(tp, &store2, v));
    let f_c_skip = run(&store, &x, |tp, v| br.coarse2fine(tp, &store, v));
    assert_eq!(f_c, f_c_skip);
}

#[test]
fn zero_inputs_annihilate_outputs() {
    let mut store = ParamStore::new(DType::F64);
    let br = FdBranch::new(config(9, 4, ScanMode::Feedback), &mut store, "fd", &mut SplitMix64::new(11)).unwrap();
    let zero = Tensor::zeros(&[9, 4]);
    let f_f = run(&store, &zero, |tp, v| br.coarse2fine(tp, &store, v));
    assert!(f_f.data().iter().all(|v| *v == 0.0));
    let f_e = run(&store, &zero, |tp, v| br.specevolve(tp, &store, v));
    assert!(f_e.data().iter().all(|v| *v == 0.0));
}

#[test]
fn selector_projections_pick_either_submodule() {
    let (br, mut store) = build(config(6, 3, ScanMode::Feedback), 12);
    let x = Tensor::randn(&[6, 3], 1.0, &mut SplitMix64::new(13));
    let bias = br.proj.b.unwrap();
    store.set_value(bias, Tensor::zeros(&[3])).unwrap();
    let eye = Tensor::eye(3);
    for upper in [true, false] {
        let mut w = Tensor::zeros(&[6, 3]);
        let off = if upper { 0 } else { 3 };
        for i in 0..3 {
            w.data_mut()[(off + i) * 3 + i] = eye.at2(i, i);
        }
        store.set_value(br.proj.w, w).unwrap();
        let mut tape = Tape::new(DType::F64);
        let xv = tape.constant(x.clone()).unwrap();
        let f = br.forward(&mut tape, &store, xv).unwrap();
        let want = if upper { f.f_f } else { f.f_enhance };
        assert_eq!(tape.value(f.f_freq), tape.value(want));
    }
}

#[test]
fn output_shape_is_preserved() {
    let mut rng = SplitMix64::new(14);
    for _ in 0..12 {
        let l = 1 + rng.below(24);
        let c = 1 + rng.below(6);
        let mut cfg = config(l, c, ScanMode::Feedback);
        cfg.separate_streams = rng.below(2) == 1;
        cfg.identity_helix = rng.below(2) == 1;
        let (br, store) = build(cfg, rng.next_u64());
        let x = Tensor::randn(&[l, c], 1.0, &mut rng);
        let mut tape = Tape::new(DType::F64);
        let xv = tape.constant(x).unwrap();
        let f = br.forward(&mut tape, &store, xv).unwrap();
        for v in [f.f_f, f.f_enhance, f.f_freq] {
            assert_eq!(tape.shape(v), &[l, c]);
            assert!(tape.value(v).is_finite());
        }
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let (br, store) = build(config(9, 2, ScanMode::Feedback), 15);
    let mut tape = Tape::new(DType::F64);
    let x = tape.constant(Tensor::zeros(&[8, 2])).unwrap();
    assert!(br.forward(&mut tape, &store, x).is_err());
}

#[test]
fn helix_adds_no_parameters() {
    let mut a = config(16, 4, ScanMode::Feedback);
    let (br, store) = build(a, 16);
    a.identity_helix = true;
    let (id, store2) = build(a, 16);
    assert_eq!(br.param_count(&store), id.param_count(&store2));
    assert_eq!(br.helix.param_count(), 0);
}

fn weighted_sum(tape: &mut Tape, y: foss_core::Var, seed: u64) -> foss_core::Result<foss_core::Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::uniform(&shape, 0.5, 1.5, &mut SplitMix64::new(seed)))?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn branch_gradients_match_finite_differences() {
    let (br, store) = build(config(9, 2, ScanMode::Feedback), 17);
    let mut rng = SplitMix64::new(18);
    for k in 0..10 {
        let x = Tensor::randn(&[9, 2], 1.0, &mut rng);
        let r = grad_check(
            |tp, v| {
                let f = br.forward(tp, &store, v)?;
                weighted_sum(tp, f.f_freq, k)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "input point {k}: {}", r.max_rel_error);
    }
    let x = Tensor::randn(&[9, 2], 1.0, &mut rng);
    let coords = sample_coords(&store, 2, &mut rng);
    let r = grad_check_params(&store, &coords, 1e-3, |tp, s| {
        let v = tp.constant(x.clone())?;
        let f = br.forward(tp, s, v)?;
        weighted_sum(tp, f.f_freq, 99)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "params: {} at {:?}", r.max_rel_error, coords[r.worst]);
}

