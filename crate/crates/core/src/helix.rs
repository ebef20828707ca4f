//! Helix reordering of spectral sequences.
//!
//! A length-`T` spectrum is laid out row-major on a `G x G` grid
//! (`G = ceil(sqrt(T))`, tail cells empty), rolled by `G/2` on both axes so
//! the DC coefficient sits at the grid center, and then read outward by
//! distance from the center with row-major tie-breaking. The result is a
//! constant permutation: low spectral radius first, high last.

use crate::error::{Error, Result};
use crate::spectral::ComplexSeq;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HelixPermutation {
    len: usize,
    grid: usize,
    center: (usize, usize),
    pi: Vec<usize>,
    pi_inv: Vec<usize>,
    radii: Vec<f64>,
}

impl HelixPermutation {
    /// Builds the spiral order for `len` frequency slots in `O(len)` time.
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("helix permutation needs T >= 1".into()));
        }
        let g = ceil_sqrt(len);
        let c = g / 2;
        // Shifted cell (u, v) holds original index ((u - c) mod g) * g + ((v - c) mod g).
        // Visiting cells row-major and bucketing by integer squared radius yields
        // the (r, u, v) order with a stable, linear pass.
        let max_r2 = 2 * c.max(g - 1 - c).pow(2);
        let mut counts = vec![0usize; max_r2 + 2];
        let mut cells = Vec::with_capacity(len);
        for u in 0..g {
            for v in 0..g {
                let idx = ((u + g - c) % g) * g + (v + g - c) % g;
                if idx >= len {
                    continue;
                }
                let r2 = sq_dist(u, c) + sq_dist(v, c);
                counts[r2 + 1] += 1;
                cells.push((r2, idx));
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut pi = vec![0; len];
        let mut radii = vec![0.0; len];
        for (r2, idx) in cells {
            let slot = counts[r2];
            counts[r2] += 1;
            pi[slot] = idx;
            radii[slot] = (r2 as f64).sqrt();
        }
        let mut pi_inv = vec![0; len];
        for (s, &i) in pi.iter().enumerate() {
            pi_inv[i] = s;
        }
        Ok(Self {
            len,
            grid: g,
            center: (c, c),
            pi,
            pi_inv,
            radii,
        })
    }

    /// Identity order, used by the ablation that disables reordering.
    pub fn identity(len: usize) -> Self {
        Self {
            len,
            grid: ceil_sqrt(len),
            center: (0, 0),
            pi: (0..len).collect(),
            pi_inv: (0..len).collect(),
            radii: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn grid_side(&self) -> usize {
        self.grid
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    /// `pi()[s]` is the original index placed at position `s`.
    pub fn pi(&self) -> &[usize] {
        &self.pi
    }

    pub fn pi_inv(&self) -> &[usize] {
        &self.pi_inv
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Always zero: the reordering is pure index bookkeeping.
    pub fn param_count(&self) -> usize {
        0
    }

    fn check_len(&self, rows: usize) -> Result<()> {
        if rows != self.len {
            return Err(Error::dim("helix", &[self.len], &[rows]));
        }
        Ok(())
    }

    /// `out[s] = seq[pi[s]]` along the first axis.
    pub fn apply(&self, seq: &Tensor) -> Result<Tensor> {
        self.check_len(seq.shape()[0])?;
        gather(seq, &self.pi)
    }

    /// `out[pi[s]] = seq[s]`.
    pub fn invert_apply(&self, seq: &Tensor) -> Result<Tensor> {
        self.check_len(seq.shape()[0])?;
        gather(seq, &self.pi_inv)
    }

    pub fn apply_var(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        self.check_len(tape.shape(seq)[0])?;
        tape.gather_rows(seq, &self.pi)
    }

    pub fn invert_apply_var(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        self.check_len(tape.shape(seq)[0])?;
        tape.gather_rows(seq, &self.pi_inv)
    }
}

fn ceil_sqrt(n: usize) -> usize {
    let mut g = (n as f64).sqrt() as usize;
    while g * g < n {
        g += 1;
    }
    while g > 1 && (g - 1) * (g - 1) >= n {
        g -= 1;
    }
    g
}

fn sq_dist(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d * d
}

fn gather(seq: &Tensor, index: &[usize]) -> Result<Tensor> {
    let w: usize = seq.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(seq.len());
    for &i in index {
        out.extend_from_slice(&seq.data()[i * w..(i + 1) * w]);
    }
    Tensor::with_dtype(seq.shape(), out, seq.dtype())
}

/// Data-dependent channel order by ascending spectral magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScanOrder {
    pub order: Vec<usize>,
    pub keys: Vec<f64>,
}

impl ChannelScanOrder {
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (s, &c) in self.order.iter().enumerate() {
            inv[c] = s;
        }
        inv
    }
}

/// Sorts channels by `|F(z)|`, ties broken by channel index.
pub fn channel_scan_order(spectrum: &ComplexSeq) -> Result<ChannelScanOrder> {
    channel_scan_order_from(spectrum.re.data(), spectrum.im.data())
}

pub fn channel_scan_order_from(re: &[f64], im: &[f64]) -> Result<ChannelScanOrder> {
    if re.is_empty() || re.len() != im.len() {
        return Err(Error::dim("channel_scan_order", &[re.len()], &[im.len()]));
    }
    let mags: Vec<f64> = re.iter().zip(im).map(|(r, i)| r.hypot(*i)).collect();
    let mut order: Vec<usize> = (0..mags.len()).collect();
    order.sort_by(|&a, &b| mags[a].total_cmp(&mags[b]).then(a.cmp(&b)));
    let keys = order.iter().map(|&i| mags[i]).collect();
    Ok(ChannelScanOrder { order, keys })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent construction: explicit shifted grid, float radii, stable sort.
    fn brute_force(t: usize) -> (Vec<usize>, Vec<f64>) {
        let g = (1..).find(|g| g * g >= t).unwrap();
        let c = g / 2;
        let mut grid = vec![vec![None; g]; g];
        for i in 0..t {
            let (r, col) = (i / g, i % g);
            grid[(r + c) % g][(col + c) % g] = Some(i);
        }
        let mut cells = vec![];
        for (u, row) in grid.iter().enumerate() {
            for (v, cell) in row.iter().enumerate() {
                if let Some(i) = cell {
                    let du = u as f64 - c as f64;
                    let dv = v as f64 - c as f64;
                    cells.push(((du * du + dv * dv).sqrt(), u, v, *i));
                }
            }
        }
        cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
        (cells.iter().map(|c| c.3).collect(), cells.iter().map(|c| c.0).collect())
    }

    #[test]
    fn singleton() {
        let p = HelixPermutation::new(1).unwrap();
        assert_eq!(p.pi(), &[0]);
        assert_eq!(p.radii(), &[0.0]);
    }

    #[test]
    fn t16_matches_brute_force() {
        let p = HelixPermutation::new(16).unwrap();
        let (pi, radii) = brute_force(16);
        assert_eq!(p.pi(), pi.as_slice());
        assert_eq!(p.radii(), radii.as_slice());
        // frozen: grid 4x4, center (2,2)
        assert_eq!(
            p.pi(),
            &[0, 12, 3, 1, 4, 15, 13, 7, 5, 8, 2, 11, 9, 14, 6, 10]
        );
    }

    #[test]
    fn matches_brute_force_for_many_lengths() {
        for t in 1..=130 {
            let p = HelixPermutation::new(t).unwrap();
            let (pi, _) = brute_force(t);
            assert_eq!(p.pi(), pi.as_slice(), "T={t}");
        }
    }

    #[test]
    fn roundtrip_and_one_hot() {
        let p = HelixPermutation::new(10).unwrap();
        let x = Tensor::new(&[10, 2], (0..20).map(f64::from).collect()).unwrap();
        let y = p.apply(&x).unwrap();
        assert_eq!(p.invert_apply(&y).unwrap(), x);
        let mut oh = vec![0.0; 10];
        oh[p.pi()[3]] = 1.0;
        let got = p.apply(&Tensor::new(&[10, 1], oh).unwrap()).unwrap();
        let hot: Vec<usize> = (0..10).filter(|&i| got.data()[i] == 1.0).collect();
        assert_eq!(hot, vec![3]);
    }

    #[test]
    fn invert_apply_one_hot() {
        let p = HelixPermutation::new(10).unwrap();
        let mut oh = vec![0.0; 10];
        oh[3] = 1.0;
        let got = p.invert_apply(&Tensor::new(&[10, 1], oh).unwrap()).unwrap();
        assert_eq!(got.data()[p.pi()[3]], 1.0);
        assert_eq!(got.sum(), 1.0);
    }

    #[test]
    fn identity_is_noop() {
        let p = HelixPermutation::identity(7);
        let x = Tensor::new(&[7, 1], (0..7).map(f64::from).collect()).unwrap();
        assert_eq!(p.apply(&x).unwrap(), x);
        assert_eq!(p.invert_apply(&x).unwrap(), x);
    }

    #[test]
    fn length_mismatch() {
        let p = HelixPermutation::new(5).unwrap();
        assert!(matches!(
            p.apply(&Tensor::zeros(&[4, 1])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn channel_scan_examples() {
        let o = channel_scan_order_from(&[1.0, 1.0, 1.0], &[0.0; 3]).unwrap();
        assert_eq!(o.order, vec![0, 1, 2]);
        let o = channel_scan_order_from(&[3.0, 1.0, 2.0], &[0.0; 3]).unwrap();
        assert_eq!(o.order, vec![1, 2, 0]);
        assert_eq!(o.keys, vec![1.0, 2.0, 3.0]);
        assert_eq!(o.inverse(), vec![2, 0, 1]);
    }

    #[test]
    fn channel_scan_matches_stable_sort() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let re: Vec<f64> = (0..32).map(|_| (rng.uniform() * 4.0).floor()).collect();
        let im = vec![0.0; 32];
        let mut oracle: Vec<usize> = (0..32).collect();
        oracle.sort_by(|&a, &b| re[a].abs().partial_cmp(&re[b].abs()).unwrap());
        assert_eq!(channel_scan_order_from(&re, &im).unwrap().order, oracle);
    }
}
