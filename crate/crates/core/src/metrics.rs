//! Best-of-K displacement metrics over candidate sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CandidateSet;

/// A scenario misses when its best final displacement exceeds this, meters.
pub const MISS_THRESHOLD: f64 = 2.0;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check(cands: &CandidateSet, truth: &[[f64; 2]]) -> Result<()> {
    if cands.horizon() != truth.len() || truth.is_empty() {
        return Err(Error::dim("metrics", &[cands.horizon()], &[truth.len()]));
    }
    Ok(())
}

/// Recursive pairwise summation in index order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if v.len() <= BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Mean displacement of candidate `k` over the horizon.
pub fn ade(cands: &CandidateSet, k: usize, truth: &[[f64; 2]]) -> f64 {
    let d: Vec<f64> = truth.iter().enumerate().map(|(t, y)| dist(cands.point(k, t), *y)).collect();
    pairwise_sum(&d) / truth.len() as f64
}

pub fn fde(cands: &CandidateSet, k: usize, truth: &[[f64; 2]]) -> f64 {
    let t = truth.len() - 1;
    dist(cands.point(k, t), truth[t])
}

fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best })
}

pub fn minade(cands: &CandidateSet, truth: &[[f64; 2]]) -> Result<f64> {
    check(cands, truth)?;
    Ok(argmin((0..cands.k()).map(|k| ade(cands, k, truth))).1)
}

/// Index attaining the minimum final displacement (first on ties) and that distance.
pub fn best_final(cands: &CandidateSet, truth: &[[f64; 2]]) -> Result<(usize, f64)> {
    check(cands, truth)?;
    Ok(argmin((0..cands.k()).map(|k| fde(cands, k, truth))))
}

pub fn minfde(cands: &CandidateSet, truth: &[[f64; 2]]) -> Result<f64> {
    Ok(best_final(cands, truth)?.1)
}

/// `minFDE + (1 - p)^2` with `p` the probability of the minFDE candidate.
pub fn b_minfde(cands: &CandidateSet, truth: &[[f64; 2]]) -> Result<f64> {
    let (k, d) = best_final(cands, truth)?;
    let p = cands.probabilities[k];
    Ok(d + (1.0 - p) * (1.0 - p))
}

pub fn is_miss(best_fde: f64) -> bool {
    best_fde > MISS_THRESHOLD
}

/// Fraction of scenarios whose best final displacement misses.
pub fn miss_rate(best_fdes: &[f64]) -> f64 {
    if best_fdes.is_empty() {
        return 0.0;
    }
    best_fdes.iter().filter(|d| is_miss(**d)).count() as f64 / best_fdes.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub ade: f64,
    pub fde: f64,
    pub b_fde: f64,
    pub miss: bool,
}

/// Metrics of one scenario; a `k` below the set size keeps the `k` most
/// probable candidates, renormalized.
pub fn score(cands: &CandidateSet, truth: &[[f64; 2]], k: usize) -> Result<ScenarioMetrics> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let set = if k < cands.k() { cands.top_k(k)? } else { cands.clone() };
    let (_, fde) = best_final(&set, truth)?;
    Ok(ScenarioMetrics {
        ade: minade(&set, truth)?,
        fde,
        b_fde: b_minfde(&set, truth)?,
        miss: is_miss(fde),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub minade_k: f64,
    pub minfde_k: f64,
    pub mr_k: f64,
    pub b_minfde_k: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_scenarios: usize,
}

impl EvalReport {
    pub fn aggregate(per: &[ScenarioMetrics], k: usize) -> Result<Self> {
        if per.is_empty() {
            return Err(Error::Config("cannot evaluate an empty split".into()));
        }
        let n = per.len() as f64;
        let mean = |f: fn(&ScenarioMetrics) -> f64| pairwise_sum(&per.iter().map(f).collect::<Vec<_>>()) / n;
        Ok(Self {
            minade_k: mean(|m| m.ade),
            minfde_k: mean(|m| m.fde),
            mr_k: mean(|m| f64::from(u8::from(m.miss))),
            b_minfde_k: mean(|m| m.b_fde),
            k,
            n_scenarios: per.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "K,n_scenarios,minade_k,minfde_k,mr_k,b_minfde_k";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.k, self.n_scenarios, self.minade_k, self.minfde_k, self.mr_k, self.b_minfde_k
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
