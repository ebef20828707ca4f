//! Component ablations: each variant is trained on the same synthetic data
//! and scored on a shared test set.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, DatasetSpec, MotifCounts};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::FoSSConfig;
use crate::train::{evaluate, train, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoFdBranch,
    IdentityHelix,
    IdentityFourierSsm,
    ConcatMlpFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoFdBranch,
        Variant::IdentityHelix,
        Variant::IdentityFourierSsm,
        Variant::ConcatMlpFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFdBranch => "no_fd_branch",
            Variant::IdentityHelix => "identity_helix",
            Variant::IdentityFourierSsm => "identity_fourier_ssm",
            Variant::ConcatMlpFusion => "concat_mlp_fusion",
        }
    }

    /// `base` with this variant's component switched off.
    pub fn apply(self, base: &FoSSConfig) -> FoSSConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoFdBranch => c.disable_fd_branch = true,
            Variant::IdentityHelix => c.identity_helix = true,
            Variant::IdentityFourierSsm => c.identity_fourier_ssm = true,
            Variant::ConcatMlpFusion => c.concat_mlp_fusion = true,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training recipe shared by every variant; `run.seed` offsets the
    /// per-run seeds.
    pub run: RunConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: usize,
    pub train_data_seed: u64,
    pub test_data_seed: u64,
    /// Candidates scored on the test set.
    pub k: usize,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            run: RunConfig {
                epochs: 16,
                ..RunConfig::default()
            },
            n_train: 480,
            n_test: 2000,
            seeds: 3,
            train_data_seed: 100,
            test_data_seed: 200,
            k: 6,
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.n_train == 0 || self.n_test == 0 || self.seeds == 0 || self.variants.is_empty() {
            return Err(Error::Config("ablation needs training data, test data, seeds and variants".into()));
        }
        if self.k == 0 || self.k > self.run.model.k {
            return Err(Error::Config(format!("k must be in 1..={}", self.run.model.k)));
        }
        Ok(())
    }

    fn dataset(&self, n: usize, seed: u64) -> Result<Vec<crate::Scenario>> {
        generate_dataset(&DatasetSpec {
            counts: MotifCounts::spread(n),
            horizon: crate::datagen::Horizon {
                t_obs: self.run.model.t_obs,
                t_fut: self.run.model.t_fut,
                ..Default::default()
            },
            seed,
            ..DatasetSpec::default()
        })
    }
}

/// One trained variant scored on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
    pub final_train_loss: f64,
    pub seconds: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,seed,K,n_scenarios,minade_k,minfde_k,mr_k,b_minfde_k,final_train_loss,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.variant.name(),
            self.seed,
            self.report.csv_row(),
            self.final_train_loss,
            self.seconds
        )
    }
}

/// Seed-averaged test metrics of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub minade_k: f64,
    pub minfde_k: f64,
    pub mr_k: f64,
    pub b_minfde_k: f64,
}

pub fn run(cfg: &AblationConfig, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let train_set = cfg.dataset(cfg.n_train, cfg.train_data_seed)?;
    let test_set = cfg.dataset(cfg.n_test, cfg.test_data_seed)?;
    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        for s in 0..cfg.seeds as u64 {
            let t0 = Instant::now();
            let run = RunConfig {
                model: variant.apply(&cfg.run.model),
                seed: cfg.run.seed.wrapping_add(s),
                ..cfg.run.clone()
            };
            let out = train(&run, &train_set, &[], |_| Ok(()))?;
            let report = evaluate(&out.model, &out.last, &test_set, cfg.k)?;
            let row = AblationRow {
                variant,
                seed: run.seed,
                report,
                final_train_loss: out.log.last().map_or(f64::NAN, |l| l.l_total),
                seconds: t0.elapsed().as_secs_f64(),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Per-variant means, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut order: Vec<Variant> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let mine: Vec<&EvalReport> = rows.iter().filter(|r| r.variant == variant).map(|r| &r.report).collect();
            let n = mine.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / n;
            VariantSummary {
                variant,
                runs: mine.len(),
                minade_k: mean(|r| r.minade_k),
                minfde_k: mean(|r| r.minfde_k),
                mr_k: mean(|r| r.mr_k),
                b_minfde_k: mean(|r| r.b_minfde_k),
            }
        })
        .collect()
}

/// True when the full model has strictly the lowest mean minADE.
pub fn full_is_best(summary: &[VariantSummary]) -> bool {
    let Some(full) = summary.iter().find(|s| s.variant == Variant::Full) else {
        return false;
    };
    summary.len() > 1 && summary.iter().filter(|s| s.variant != Variant::Full).all(|s| full.minade_k < s.minade_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, minade: f64) -> AblationRow {
        AblationRow {
            variant,
            seed: 0,
            report: EvalReport {
                minade_k: minade,
                minfde_k: 2.0 * minade,
                mr_k: 0.5,
                b_minfde_k: 2.0 * minade + 0.1,
                k: 6,
                n_scenarios: 10,
            },
            final_train_loss: 0.1,
            seconds: 1.0,
        }
    }

    #[test]
    fn variants_flip_one_switch_each() {
        let base = FoSSConfig::default();
        assert_eq!(Variant::Full.apply(&base), base);
        for v in &Variant::ALL[1..] {
            assert_ne!(v.apply(&base), base, "{}", v.name());
        }
    }

    #[test]
    fn summary_averages_seeds_and_orders_by_appearance() {
        let rows = [
            row(Variant::Full, 1.0),
            row(Variant::Full, 2.0),
            row(Variant::NoFdBranch, 1.6),
            row(Variant::NoFdBranch, 1.6),
        ];
        let s = summarize(&rows);
        assert_eq!(s[0].variant, Variant::Full);
        assert_eq!((s[0].runs, s[0].minade_k), (2, 1.5));
        assert!(full_is_best(&s));
        let tie = summarize(&[row(Variant::Full, 1.0), row(Variant::IdentityHelix, 1.0)]);
        assert!(!full_is_best(&tie));
        assert!(!full_is_best(&summarize(&[row(Variant::Full, 1.0)])));
    }

    #[test]
    fn csv_row_matches_header() {
        let r = row(Variant::ConcatMlpFusion, 1.0);
        assert_eq!(r.csv_row().split(',').count(), AblationRow::CSV_HEADER.split(',').count());
        assert!(r.csv_row().starts_with("concat_mlp_fusion,0,6,10,"));
    }
}
