//! Wall-time scaling measurements over sequence length.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd_branch::{FdBranch, FdBranchConfig, SsmSizes};
use crate::helix::HelixPermutation;
use crate::model::Fusion;
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::ssm::{ScanMode, SelectiveSsm};
use crate::tape::Tape;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    SelectiveScan,
    HelixSort,
    FdBranch,
    Fuse,
    NaiveAttention,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::SelectiveScan,
        Component::HelixSort,
        Component::FdBranch,
        Component::Fuse,
        Component::NaiveAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::SelectiveScan => "selective_scan",
            Component::HelixSort => "helix_sort",
            Component::FdBranch => "fd_branch",
            Component::Fuse => "fuse",
            Component::NaiveAttention => "naive_attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub d_model: usize,
    pub ssm: SsmSizes,
    pub evolve_ssm: SsmSizes,
    pub lengths: Vec<usize>,
    /// Timed repetitions per point; the median is reported.
    pub reps: usize,
    pub components: Vec<Component>,
    /// Longest sequence for the taped fusion, whose score matrix is `T x T`.
    pub fuse_max_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
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
            lengths: (8..=13).map(|p| 1 << p).collect(),
            reps: 5,
            components: Component::ALL.to_vec(),
            fuse_max_len: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub component: Component,
    #[serde(rename = "T")]
    pub t: usize,
    pub median_s: f64,
    /// Approximate floating-point operation count.
    pub ops: f64,
    pub params: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "component,T,median_s,ops,params";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6e},{:.3e},{}", self.component.name(), self.t, self.median_s, self.ops, self.params)
    }
}

/// `time(T_next) / time(T)` between consecutive measured lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRatio {
    pub component: Component,
    #[serde(rename = "T")]
    pub t: usize,
    pub t_next: usize,
    pub ratio: f64,
}

impl ScalingRatio {
    pub const CSV_HEADER: &'static str = "component,T,T_next,ratio";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.4}", self.component.name(), self.t, self.t_next, self.ratio)
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of `reps` calls after one warm-up call.
pub fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Dense `[m, k] x [k, n]` product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != k {
        return Err(Error::Config(format!("matmul inner sizes {k} and {}", b.shape()[0])));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Single-head softmax self-attention evaluated row by row in `O(T)` memory.
pub fn naive_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let (q, k, v) = (matmul(x, wq)?, matmul(x, wk)?, matmul(x, wv)?);
    let (t, d) = (x.shape()[0], wq.shape()[1]);
    let scale = 1.0 / (d as f64).sqrt();
    let (q, k, v) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; t * d];
    let mut scores = vec![0.0; t];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, s) in scores.iter().enumerate() {
            let w = s / z;
            for (o, vj) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * vj;
            }
        }
    }
    Tensor::new(&[t, d], out)
}

fn log2(t: usize) -> f64 {
    (t.max(2) as f64).log2()
}

enum Kernel {
    Scan(SelectiveSsm),
    Helix(HelixPermutation),
    Fd(FdBranch),
    Fuse(Fusion, Tensor),
    Attention([Tensor; 3]),
}

/// One component at one sequence length with its inputs and weights.
pub struct Workload {
    pub component: Component,
    pub t: usize,
    /// Rough multiply-add count of one call.
    pub ops: f64,
    pub params: usize,
    x: Tensor,
    store: ParamStore,
    kernel: Kernel,
}

impl Workload {
    /// `None` for lengths the component skips.
    pub fn new(cfg: &BenchConfig, component: Component, t: usize, rng: &mut SplitMix64) -> Result<Option<Self>> {
        if t == 0 || cfg.d_model == 0 {
            return Err(Error::Config("bench sizes must be >= 1".into()));
        }
        let c = cfg.d_model;
        let tf = t as f64;
        let cf = c as f64;
        let x = Tensor::randn(&[t, c], 1.0, rng);
        let mut store = ParamStore::new(DType::F64);
        let (kernel, ops, params) = match component {
            Component::SelectiveScan => {
                let ssm = SelectiveSsm::new(cfg.ssm.with_io(c, c, ScanMode::Feedback), &mut store, "scan", rng)?;
                let p = store.scalar_count();
                let n = cfg.ssm.n as f64;
                (Kernel::Scan(ssm), tf * (2.0 * p as f64 + 4.0 * n * 2.0 * cf), p)
            }
            Component::HelixSort => {
                let helix = HelixPermutation::new(t)?;
                let p = helix.param_count();
                (Kernel::Helix(helix), tf * cf, p)
            }
            Component::FdBranch => {
                let fd_cfg = FdBranchConfig {
                    d_model: c,
                    seq_len: t,
                    dwconv_width: 3,
                    coarse: cfg.ssm,
                    evolve: cfg.evolve_ssm,
                    mode: ScanMode::Feedback,
                    identity_helix: false,
                    identity_fourier_ssm: false,
                    skip_channel_scan: false,
                    separate_streams: false,
                };
                let branch = FdBranch::new(fd_cfg, &mut store, "fd", rng)?;
                let p = branch.param_count(&store);
                (Kernel::Fd(branch), tf * 2.0 * p as f64 + 20.0 * tf * log2(t) * cf, p)
            }
            Component::Fuse => {
                if t > cfg.fuse_max_len {
                    return Ok(None);
                }
                let fusion = Fusion::new(&mut store, "fuse", c, 1, false, rng);
                let f = Tensor::randn(&[t, c], 1.0, rng);
                let p = store.scalar_count();
                (Kernel::Fuse(fusion, f), 4.0 * tf * tf * cf + 2.0 * tf * p as f64, p)
            }
            Component::NaiveAttention => {
                let std = 1.0 / cf.sqrt();
                let w = [(); 3].map(|_| Tensor::randn(&[c, c], std, rng));
                (Kernel::Attention(w), 4.0 * tf * tf * cf + 6.0 * tf * cf * cf, 3 * c * c)
            }
        };
        Ok(Some(Self {
            component,
            t,
            ops,
            params,
            x,
            store,
            kernel,
        }))
    }

    /// One forward call.
    pub fn run(&self) -> Result<()> {
        let store = &self.store;
        let mut tape = Tape::new(DType::F64);
        match &self.kernel {
            Kernel::Scan(ssm) => {
                let xv = tape.constant(self.x.clone())?;
                ssm.forward(&mut tape, store, xv, None)?;
            }
            Kernel::Helix(helix) => {
                std::hint::black_box(helix.apply(&self.x)?);
            }
            Kernel::Fd(branch) => {
                let xv = tape.constant(self.x.clone())?;
                branch.forward(&mut tape, store, xv)?;
            }
            Kernel::Fuse(fusion, f) => {
                let y = tape.constant(self.x.clone())?;
                let fv = tape.constant(f.clone())?;
                fusion.forward(&mut tape, store, y, fv)?;
            }
            Kernel::Attention([wq, wk, wv]) => {
                std::hint::black_box(naive_attention(&self.x, wq, wk, wv)?);
            }
        }
        Ok(())
    }

    pub fn measure(&self, reps: usize) -> Result<BenchRow> {
        Ok(BenchRow {
            component: self.component,
            t: self.t,
            median_s: time_median(reps, || self.run())?,
            ops: self.ops,
            params: self.params,
        })
    }
}

/// Times every configured component at every configured length. The
/// repetitions of one component take turns across lengths, so slow drift in
/// machine speed shifts every length alike.
pub fn run(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    if cfg.d_model == 0 || cfg.lengths.contains(&0) {
        return Err(Error::Config("bench sizes must be >= 1".into()));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut rows = Vec::new();
    for &comp in &cfg.components {
        let mut loads = Vec::new();
        for &t in &cfg.lengths {
            if let Some(w) = Workload::new(cfg, comp, t, &mut rng)? {
                w.run()?;
                loads.push(w);
            }
        }
        let mut times = vec![Vec::with_capacity(cfg.reps); loads.len()];
        for _ in 0..cfg.reps.max(1) {
            for (w, ts) in loads.iter().zip(&mut times) {
                let t0 = Instant::now();
                w.run()?;
                ts.push(t0.elapsed().as_secs_f64());
            }
        }
        for (w, ts) in loads.iter().zip(times) {
            let r = BenchRow {
                component: comp,
                t: w.t,
                median_s: median(ts),
                ops: w.ops,
                params: w.params,
            };
            on_row(&r);
            rows.push(r);
        }
    }
    Ok(rows)
}

pub fn scaling_ratios(rows: &[BenchRow]) -> Vec<ScalingRatio> {
    rows.windows(2)
        .filter(|w| w[0].component == w[1].component)
        .map(|w| ScalingRatio {
            component: w[0].component,
            t: w[0].t,
            t_next: w[1].t,
            ratio: w[1].median_s / w[0].median_s,
        })
        .collect()
}
