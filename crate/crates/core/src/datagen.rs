//! Synthetic single-agent scenarios and their JSON-lines storage.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Largest admissible distance between consecutive positions, meters.
pub const MAX_STEP_DISPLACEMENT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    Straight,
    Turn,
    LaneChange,
    UTurn,
}

impl Motif {
    pub const ALL: [Motif; 4] = [Motif::Straight, Motif::Turn, Motif::LaneChange, Motif::UTurn];

    pub fn name(self) -> &'static str {
        match self {
            Motif::Straight => "straight",
            Motif::Turn => "turn",
            Motif::LaneChange => "lane_change",
            Motif::UTurn => "u_turn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Sampling rate and horizon lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    pub t_obs: usize,
    pub t_fut: usize,
    pub dt: f64,
}

impl Horizon {
    /// 2 s observed, 3 s predicted at 10 Hz.
    pub const ARGO1_LIKE: Horizon = Horizon {
        t_obs: 20,
        t_fut: 30,
        dt: 0.1,
    };
    /// 5 s observed, 6 s predicted at 10 Hz.
    pub const ARGO2_LIKE: Horizon = Horizon {
        t_obs: 50,
        t_fut: 60,
        dt: 0.1,
    };

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "argo1-like" => Some(Self::ARGO1_LIKE),
            "argo2-like" => Some(Self::ARGO2_LIKE),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.t_obs + self.t_fut
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Self::ARGO1_LIKE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotifParams {
    /// m/s.
    pub speed: f64,
    /// Signed, 1/m; positive turns left.
    pub curvature: f64,
    /// Signed, m; positive moves left.
    pub lateral_offset: f64,
    pub transition_steps: usize,
    /// Standard deviation of positional noise, m.
    pub noise_sigma: f64,
    /// Step at which the maneuver begins.
    pub onset: usize,
}

impl Default for MotifParams {
    fn default() -> Self {
        Self {
            speed: 10.0,
            curvature: 0.05,
            lateral_offset: 3.5,
            transition_steps: 20,
            noise_sigma: 0.0,
            onset: 10,
        }
    }
}

impl MotifParams {
    pub fn validate(&self, motif: Motif, horizon: &Horizon) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if horizon.t_obs == 0 || horizon.t_fut == 0 || !(horizon.dt > 0.0) {
            return bad(format!("invalid horizon {horizon:?}"));
        }
        if !(self.speed > 0.0) || !self.speed.is_finite() {
            return bad(format!("speed must be > 0, got {}", self.speed));
        }
        if self.speed * horizon.dt > MAX_STEP_DISPLACEMENT {
            return bad(format!(
                "speed {} m/s exceeds {MAX_STEP_DISPLACEMENT} m per step",
                self.speed
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        match motif {
            Motif::Turn | Motif::UTurn if self.curvature == 0.0 || !self.curvature.is_finite() => {
                bad(format!("{} needs a finite non-zero curvature", motif.name()))
            }
            Motif::UTurn if self.onset + 2 >= horizon.len() => {
                bad(format!("u_turn onset {} leaves no room to turn", self.onset))
            }
            Motif::LaneChange if self.transition_steps == 0 || !self.lateral_offset.is_finite() => {
                bad("lane_change needs transition_steps >= 1 and a finite offset".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub dt: f64,
    pub motif: Motif,
    pub observed: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

impl Scenario {
    fn data_err(&self, msg: impl Into<String>) -> Error {
        Error::Data {
            id: self.id.clone(),
            msg: msg.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(self.data_err("empty id"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(self.data_err(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.observed.is_empty() || self.future.is_empty() {
            return Err(self.data_err("observed and future must be non-empty"));
        }
        let track: Vec<&[f64; 2]> = self.observed.iter().chain(&self.future).collect();
        if track.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(self.data_err("non-finite position"));
        }
        for (i, w) in track.windows(2).enumerate() {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if d > MAX_STEP_DISPLACEMENT {
                return Err(self.data_err(format!(
                    "step {i} -> {} moves {d:.3} m (limit {MAX_STEP_DISPLACEMENT} m)",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// One JSON object with positions at 6 decimal places.
    pub fn to_json_line(&self) -> String {
        fn points(out: &mut String, pts: &[[f64; 2]]) {
            out.push('[');
            for (i, p) in pts.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "[{:.6},{:.6}]", p[0], p[1]);
            }
            out.push(']');
        }
        let mut s = String::with_capacity(64 + 24 * (self.observed.len() + self.future.len()));
        let id = serde_json::to_string(&self.id).expect("string serializes");
        let dt = serde_json::to_string(&self.dt).expect("number serializes");
        let _ = write!(s, "{{\"id\":{id},\"dt\":{dt},\"motif\":\"{}\",\"observed\":", self.motif.name());
        points(&mut s, &self.observed);
        s.push_str(",\"future\":");
        points(&mut s, &self.future);
        let _ = write!(s, ",\"split\":\"{}\"}}", self.split.name());
        s
    }
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

/// Position after arc length `a` on a circle of signed curvature `k`
/// entered at `q` with heading `phi`.
fn arc(q: [f64; 2], phi: f64, k: f64, a: f64) -> [f64; 2] {
    let end = phi + k * a;
    [q[0] + (end.sin() - phi.sin()) / k, q[1] - (end.cos() - phi.cos()) / k]
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Noise-free position of step `i` for a path that starts at `p0` with heading `theta`.
fn path_point(motif: Motif, p: &MotifParams, h: &Horizon, p0: [f64; 2], theta: f64, i: usize) -> [f64; 2] {
    let ds = p.speed * h.dt;
    let s = ds * i as f64;
    let s_on = ds * p.onset as f64;
    let line = |q: [f64; 2], phi: f64, a: f64| {
        let u = unit(phi);
        [q[0] + a * u[0], q[1] + a * u[1]]
    };
    match motif {
        Motif::Straight => line(p0, theta, s),
        Motif::Turn => {
            if s <= s_on {
                line(p0, theta, s)
            } else {
                arc(line(p0, theta, s_on), theta, p.curvature, s - s_on)
            }
        }
        Motif::UTurn => {
            let k = u_turn_curvature(p, h);
            let sweep = PI / k.abs();
            let q = line(p0, theta, s_on);
            if s <= s_on {
                line(p0, theta, s)
            } else if s <= s_on + sweep {
                arc(q, theta, k, s - s_on)
            } else {
                let out = arc(q, theta, k, sweep);
                line(out, theta + k.signum() * PI, s - s_on - sweep)
            }
        }
        Motif::LaneChange => {
            let mid = p.onset as f64 + p.transition_steps as f64 / 2.0;
            let lat = p.lateral_offset * logistic(8.0 * (i as f64 - mid) / p.transition_steps as f64);
            let base = line(p0, theta, s);
            let n = unit(theta + PI / 2.0);
            [base[0] + lat * n[0], base[1] + lat * n[1]]
        }
    }
}

/// Requested curvature, tightened if needed so the half turn completes
/// before the second-to-last step.
pub fn u_turn_curvature(p: &MotifParams, h: &Horizon) -> f64 {
    let room = p.speed * h.dt * (h.len() - 2 - p.onset) as f64;
    let k = p.curvature.abs().max(PI / room);
    k * p.curvature.signum()
}

/// One scenario; the seed fixes start pose and noise.
pub fn generate_scenario(motif: Motif, params: &MotifParams, horizon: &Horizon, seed: u64, id: impl Into<String>) -> Result<Scenario> {
    params.validate(motif, horizon)?;
    let mut rng = SplitMix64::new(seed);
    let p0 = [rng.uniform_range(-100.0, 100.0), rng.uniform_range(-100.0, 100.0)];
    let theta = rng.uniform_range(-PI, PI);
    let mut track: Vec<[f64; 2]> = (0..horizon.len())
        .map(|i| path_point(motif, params, horizon, p0, theta, i))
        .collect();
    if params.noise_sigma > 0.0 {
        for q in &mut track {
            q[0] += params.noise_sigma * rng.normal();
            q[1] += params.noise_sigma * rng.normal();
        }
    }
    let future = track.split_off(horizon.t_obs);
    let sc = Scenario {
        id: id.into(),
        dt: horizon.dt,
        motif,
        observed: track,
        future,
        split: Split::Train,
    };
    sc.validate()?;
    Ok(sc)
}

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut SplitMix64) -> f64 {
        rng.uniform_range(self.lo, self.hi)
    }
}

/// Sampling ranges; curvatures and offsets are magnitudes with a random sign.
/// Onsets are fractions of the full track length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamRanges {
    pub speed: Range,
    pub turn_curvature: Range,
    pub u_turn_curvature: Range,
    pub u_turn_speed: Range,
    pub lateral_offset: Range,
    pub transition_steps: Range,
    pub noise_sigma: Range,
    pub onset: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            speed: Range::new(4.0, 15.0),
            turn_curvature: Range::new(0.02, 0.08),
            u_turn_curvature: Range::new(0.15, 0.3),
            u_turn_speed: Range::new(3.0, 7.0),
            lateral_offset: Range::new(2.5, 4.0),
            transition_steps: Range::new(10.0, 30.0),
            noise_sigma: Range::new(0.0, 0.05),
            onset: Range::new(0.2, 0.6),
        }
    }
}

impl ParamRanges {
    pub fn sample(&self, motif: Motif, horizon: &Horizon, rng: &mut SplitMix64) -> MotifParams {
        let sign = |rng: &mut SplitMix64| if rng.below(2) == 0 { 1.0 } else { -1.0 };
        let speed = match motif {
            Motif::UTurn => self.u_turn_speed.sample(rng),
            _ => self.speed.sample(rng),
        };
        let curvature = match motif {
            Motif::UTurn => self.u_turn_curvature.sample(rng),
            _ => self.turn_curvature.sample(rng),
        } * sign(rng);
        let lateral_offset = self.lateral_offset.sample(rng) * sign(rng);
        let transition_steps = self.transition_steps.sample(rng).round().max(1.0) as usize;
        let noise_sigma = self.noise_sigma.sample(rng);
        let onset = ((self.onset.sample(rng) * horizon.len() as f64).round() as usize).min(horizon.len() - 3);
        MotifParams {
            speed,
            curvature,
            lateral_offset,
            transition_steps,
            noise_sigma,
            onset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotifCounts {
    pub straight: usize,
    pub turn: usize,
    pub lane_change: usize,
    pub u_turn: usize,
}

impl MotifCounts {
    pub const fn uniform(n: usize) -> Self {
        Self {
            straight: n,
            turn: n,
            lane_change: n,
            u_turn: n,
        }
    }

    /// `total` scenarios spread as evenly as possible over the motifs.
    pub fn spread(total: usize) -> Self {
        let q = total / 4;
        let r = total % 4;
        Self {
            straight: q + usize::from(r > 0),
            turn: q + usize::from(r > 1),
            lane_change: q + usize::from(r > 2),
            u_turn: q,
        }
    }

    pub fn get(&self, motif: Motif) -> usize {
        match motif {
            Motif::Straight => self.straight,
            Motif::Turn => self.turn,
            Motif::LaneChange => self.lane_change,
            Motif::UTurn => self.u_turn,
        }
    }

    pub fn total(&self) -> usize {
        Motif::ALL.iter().map(|m| self.get(*m)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub counts: MotifCounts,
    pub ranges: ParamRanges,
    pub horizon: Horizon,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            counts: MotifCounts::uniform(250),
            ranges: ParamRanges::default(),
            horizon: Horizon::default(),
            seed: 0,
        }
    }
}

/// Split sizes for `n` records: 70% train, 15% validation, the rest test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

/// Scenario `i` uses the seed `derive(seed, i)`; splits come from a seeded shuffle.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Scenario>> {
    let mut out = Vec::with_capacity(spec.counts.total());
    for motif in Motif::ALL {
        for _ in 0..spec.counts.get(motif) {
            let index = out.len() as u64;
            let mut rng = SplitMix64::new(SplitMix64::derive(spec.seed, index));
            let params = spec.ranges.sample(motif, &spec.horizon, &mut rng);
            let id = format!("{}-{index:06}", motif.name());
            out.push(generate_scenario(motif, &params, &spec.horizon, rng.next_u64(), id)?);
        }
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    SplitMix64::new(SplitMix64::derive(spec.seed, u64::MAX)).shuffle(&mut order);
    let (train, val, _) = split_sizes(out.len());
    for (rank, &i) in order.iter().enumerate() {
        out[i].split = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

pub fn write_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sc in scenarios {
        w.write_all(sc.to_json_line().as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn generate_dataset_file(spec: &DatasetSpec, path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let data = generate_dataset(spec)?;
    write_scenarios(path, &data)?;
    Ok(data)
}

/// Reads scenarios in file order. Blank lines are skipped; every record must
/// share the first record's observed and future lengths.
pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out: Vec<Scenario> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sc: Scenario = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        sc.validate()?;
        if let Some(first) = out.first() {
            if sc.observed.len() != first.observed.len() || sc.future.len() != first.future.len() {
                return Err(sc.data_err(format!(
                    "horizon {}+{} differs from the dataset's {}+{}",
                    sc.observed.len(),
                    sc.future.len(),
                    first.observed.len(),
                    first.future.len()
                )));
            }
        }
        out.push(sc);
    }
    Ok(out)
}

pub fn by_split(scenarios: &[Scenario], split: Split) -> Vec<Scenario> {
    scenarios.iter().filter(|s| s.split == split).cloned().collect()
}
