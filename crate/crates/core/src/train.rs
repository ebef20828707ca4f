//! Training loop, evaluation and model checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::datagen::Scenario;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::{score, EvalReport, ScenarioMetrics};
use crate::model::{CandidateSet, FoSS, FoSSConfig, LossBreakdown};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without strict improvement of validation minADE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: FoSSConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau: PlateauConfig,
    /// Global L2 gradient norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub dtype: DType,
    /// Candidates kept for validation minADE; defaults to the model's K.
    pub eval_k: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: FoSSConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 32,
            epochs: 50,
            plateau: PlateauConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
            dtype: DType::F64,
            eval_k: None,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Full-scale recipe: batch 128.
    pub fn reference_recipe() -> Self {
        Self {
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || p.patience == 0 {
            return Err(Error::Config(format!("invalid plateau settings {p:?}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.eval_k == Some(0) {
            return Err(Error::Config("eval_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn eval_k(&self) -> usize {
        self.eval_k.unwrap_or(self.model.k)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }
}

/// Worker count: `FOSS_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("FOSS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving map over contiguous chunks on up to [`worker_count`] threads.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = worker_count().min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Model-frame tensors of one scenario.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Tensor,
    pub y: Tensor,
    pub frame: Frame,
}

impl Sample {
    pub fn new(sc: &Scenario) -> Self {
        let frame = Frame::from_observed(&sc.observed);
        Self {
            x: frame.encode(&sc.observed),
            y: frame.encode(&sc.future),
            frame,
        }
    }
}

/// Candidates in world coordinates.
pub fn predict(model: &FoSS, store: &ParamStore, sc: &Scenario) -> Result<CandidateSet> {
    let s = Sample::new(sc);
    let (cands, _) = model.forward(store, &s.x)?;
    CandidateSet::new(s.frame.decode(&cands.trajectories), cands.probabilities)
}

/// Averages the four metrics over `scenarios` with the `k` most probable candidates.
pub fn evaluate(model: &FoSS, store: &ParamStore, scenarios: &[Scenario], k: usize) -> Result<EvalReport> {
    if scenarios.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let per = par_map(scenarios, |sc| -> Result<ScenarioMetrics> {
        let cands = predict(model, store, sc)?;
        score(&cands, &sc.future, k)
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    EvalReport::aggregate(&per, k)
}

type ParamGrads = Vec<(ParamId, Vec<f64>)>;

fn sample_grad(model: &FoSS, store: &ParamStore, s: &Sample) -> Result<(LossBreakdown, ParamGrads)> {
    let mut tape = Tape::new(store.dtype());
    let (_, l) = model.loss_tape(&mut tape, store, &s.x, &s.y)?;
    let values = l.values(&tape);
    if !values.l_total.is_finite() {
        return Ok((values, Vec::new()));
    }
    let grads = tape.backward(l.l_total)?.params(&tape);
    Ok((values, grads))
}

/// Mean loss over `samples` at the current weights.
pub fn mean_loss(model: &FoSS, store: &ParamStore, scenarios: &[Scenario]) -> Result<LossBreakdown> {
    let losses = par_map(scenarios, |sc| -> Result<LossBreakdown> {
        let s = Sample::new(sc);
        let mut tape = Tape::new(store.dtype());
        let (_, l) = model.loss_tape(&mut tape, store, &s.x, &s.y)?;
        Ok(l.values(&tape))
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(mean_breakdown(&losses))
}

fn mean_breakdown(v: &[LossBreakdown]) -> LossBreakdown {
    use crate::metrics::pairwise_sum;
    let n = v.len().max(1) as f64;
    let m = |f: fn(&LossBreakdown) -> f64| pairwise_sum(&v.iter().map(f).collect::<Vec<_>>()) / n;
    LossBreakdown {
        l_time: m(|l| l.l_time),
        l_freq: m(|l| l.l_freq),
        l_total: m(|l| l.l_total),
    }
}

/// Bias-corrected adaptive-moment updates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            lr: cfg.lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let dtype = store.dtype();
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let mut value = p.value.data().to_vec();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                value[j] = dtype.round(value[j] - self.lr * mhat / (vhat.sqrt() + eps));
            }
            p.value.data_mut().copy_from_slice(&value);
        }
    }
}

/// Plateau schedule state.
#[derive(Debug, Clone, Copy)]
pub struct Plateau {
    pub cfg: PlateauConfig,
    pub best: f64,
    pub stale: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch's metric. Returns `(improved, reduce_lr)`.
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
            return (true, false);
        }
        self.stale += 1;
        if self.stale >= self.cfg.patience {
            self.stale = 0;
            return (false, true);
        }
        (false, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_time: f64,
    pub l_freq: f64,
    pub l_total: f64,
    pub val_minade: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,l_time,l_freq,l_total,val_minade,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.l_time, self.l_freq, self.l_total, self.val_minade, self.lr
        )
    }
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    Epoch(&'a EpochLog),
    /// The monitored metric strictly improved at this epoch.
    Improved {
        epoch: usize,
        metric: f64,
        store: &'a ParamStore,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FoSS,
    /// Weights at the best monitored epoch.
    pub best: ParamStore,
    pub last: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Mean training loss before the first update.
    pub initial: LossBreakdown,
}

/// Mini-batch training. The monitor is validation minADE at `eval_k`. With an
/// empty `val` the learning rate stays fixed and the best checkpoint follows
/// the epoch's mean training loss.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Scenario],
    val: &[Scenario],
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (model, mut store) = FoSS::new(cfg.model.clone(), cfg.dtype, SplitMix64::derive(cfg.seed, 0))?;
    let samples: Vec<Sample> = train_set.iter().map(Sample::new).collect();
    let initial = mean_loss(&model, &store, train_set)?;
    let mut adam = Adam::new(cfg.optimizer, &store);
    let mut plateau = Plateau::new(cfg.plateau);
    let mut shuffle = SplitMix64::new(SplitMix64::derive(cfg.seed, 1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = store.clone();
    let (mut best_epoch, mut best_metric) = (0, f64::INFINITY);

    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        let lr = adam.lr;
        let mut epoch_losses = Vec::with_capacity(samples.len());
        for batch in order.chunks(cfg.batch_size) {
            let step = adam.step as usize + 1;
            let picked: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
            let results = par_map(&picked, |s| sample_grad(&model, &store, s));
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (l, g) = r?;
                if !l.l_total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                store.accumulate(&g, scale);
                epoch_losses.push(l);
            }
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            if let Some(limit) = cfg.clip_norm {
                if norm > limit {
                    store.scale_grads(limit / norm);
                }
            }
            adam.update(&mut store);
        }
        let mean = mean_breakdown(&epoch_losses);
        let monitor = if val.is_empty() {
            mean.l_total
        } else {
            evaluate(&model, &store, val, cfg.eval_k())?.minade_k
        };
        let entry = EpochLog {
            epoch,
            l_time: mean.l_time,
            l_freq: mean.l_freq,
            l_total: mean.l_total,
            val_minade: monitor,
            lr,
        };
        on_event(TrainEvent::Epoch(&entry))?;
        log.push(entry);
        let improved = monitor < best_metric;
        let reduce = !val.is_empty() && plateau.observe(monitor).1;
        if improved {
            best = store.clone();
            best_epoch = epoch;
            best_metric = monitor;
            on_event(TrainEvent::Improved {
                epoch,
                metric: monitor,
                store: &store,
            })?;
        }
        if reduce {
            adam.lr *= cfg.plateau.factor;
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        last: store,
        log,
        best_epoch,
        best_metric,
        initial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: RunConfig,
    pub epoch: usize,
    pub best_metric: f64,
}

pub fn save_model(path: impl AsRef<Path>, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let value = serde_json::to_value(meta)?;
    Checkpoint::from_store(store, value).save(path)?;
    Ok(())
}

/// Rebuilds the model from the stored configuration and loads its weights.
pub fn load_model(path: impl AsRef<Path>) -> Result<(FoSS, ParamStore, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.metadata.clone()).map_err(CheckpointError::Metadata)?;
    let (model, mut store) = FoSS::new(meta.config.model.clone(), meta.config.dtype, SplitMix64::derive(meta.config.seed, 0))?;
    ck.load_into(&mut store)?;
    Ok((model, store, meta))
}
