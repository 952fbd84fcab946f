//! Ground truth and measurement generation for road-bound targets observed by
//! mobile sensors with a limited along-road field of view.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkDocument, NetworkError, RoadNetwork, SegmentId};
use crate::statespace::{FootprintInterval, Observation, Scan};

pub type Rng64 = ChaCha8Rng;

const FORK_NETWORK: &str = include_str!("../data/networks/fork.toml");
const PARALLEL_NETWORK: &str = include_str!("../data/networks/parallel.toml");
const GRID_NETWORK: &str = include_str!("../data/networks/grid.toml");

const SCENARIO1: &str = include_str!("../data/scenarios/scenario1.toml");
const SCENARIO2: &str = include_str!("../data/scenarios/scenario2.toml");
const SCENARIO3A: &str = include_str!("../data/scenarios/scenario3a.toml");
const SCENARIO3B: &str = include_str!("../data/scenarios/scenario3b.toml");

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario preset '{0}' (expected 1, 2, 3a or 3b)")]
    UnknownPreset(String),
    #[error("unknown built-in network '{0}'")]
    UnknownNetwork(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("scenario document: {0}")]
    Parse(String),
}

/// How `birth_rate` is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BirthRateUnit {
    /// Expected births per time step.
    #[default]
    PerStep,
    /// Expected births over the whole run, spread evenly over the steps.
    PerRun,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetInit {
    pub segment: usize,
    pub position: f64,
    /// Drawn from the target speed distribution when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Built-in network name: `fork`, `parallel` or `grid`.
    pub network: String,
    pub duration: u32,
    pub dt: f64,
    pub process_noise_q: f64,
    pub sigma: f64,
    pub initial_targets: Vec<TargetInit>,
    /// Additional initial targets at uniform random network positions.
    pub random_initial_targets: usize,
    pub target_speed_mean: f64,
    pub target_speed_sd: f64,
    pub sensor_count: usize,
    pub sensor_speed_mean: f64,
    pub sensor_speed_sd: f64,
    pub fov_half_length: f64,
    pub p_d: f64,
    pub clutter_rate: f64,
    pub clutter_speed_max: f64,
    pub birth_rate: f64,
    pub birth_rate_unit: BirthRateUnit,
    pub empty_scan_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            network: "fork".into(),
            duration: 100,
            dt: 1.0,
            process_noise_q: 0.1,
            sigma: 0.5,
            initial_targets: Vec::new(),
            random_initial_targets: 0,
            target_speed_mean: 1.415,
            target_speed_sd: 0.215,
            sensor_count: 10,
            sensor_speed_mean: 12.3,
            sensor_speed_sd: 1.5,
            fov_half_length: 30.0,
            p_d: 0.95,
            clutter_rate: 0.6,
            clutter_speed_max: 2.0,
            birth_rate: 0.0,
            birth_rate_unit: BirthRateUnit::PerStep,
            empty_scan_fraction: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, net: &RoadNetwork<f64>) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        if self.duration < 1 {
            return bad("duration must be at least 1".into());
        }
        for (name, v) in [
            ("dt", self.dt),
            ("process_noise_q", self.process_noise_q),
            ("sigma", self.sigma),
            ("fov_half_length", self.fov_half_length),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("clutter_rate", self.clutter_rate),
            ("birth_rate", self.birth_rate),
            ("target_speed_sd", self.target_speed_sd),
            ("sensor_speed_sd", self.sensor_speed_sd),
            ("clutter_speed_max", self.clutter_speed_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("p_d", self.p_d), ("empty_scan_fraction", self.empty_scan_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for t in &self.initial_targets {
            let len = net.length(SegmentId(t.segment))?;
            if !(0.0..=len).contains(&t.position) {
                return bad(format!(
                    "initial target position {} outside segment {} of length {len}",
                    t.position, t.segment
                ));
            }
        }
        Ok(())
    }

    /// Expected births per time step.
    pub fn births_per_step(&self) -> f64 {
        match self.birth_rate_unit {
            BirthRateUnit::PerStep => self.birth_rate,
            BirthRateUnit::PerRun => self.birth_rate / f64::from(self.duration),
        }
    }
}

/// Network document of a built-in network.
pub fn builtin_network(name: &str) -> Result<NetworkDocument, SimError> {
    let text = match name {
        "fork" => FORK_NETWORK,
        "parallel" => PARALLEL_NETWORK,
        "grid" => GRID_NETWORK,
        other => return Err(SimError::UnknownNetwork(other.into())),
    };
    toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "1")]
    S1,
    #[serde(rename = "2")]
    S2,
    #[serde(rename = "3a")]
    S3a,
    #[serde(rename = "3b")]
    S3b,
}

impl FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "s1" => Ok(Preset::S1),
            "2" | "s2" => Ok(Preset::S2),
            "3a" | "s3a" => Ok(Preset::S3a),
            "3b" | "s3b" => Ok(Preset::S3b),
            _ => Err(SimError::UnknownPreset(s.into())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::S1 => "1",
            Preset::S2 => "2",
            Preset::S3a => "3a",
            Preset::S3b => "3b",
        })
    }
}

/// Per-run knobs of the scenario 3 presets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Variant {
    pub sensors: Option<usize>,
    pub empty_scan_fraction: Option<f64>,
}

/// Sensor counts of the scenario 3a sweep.
pub const S3A_SENSOR_COUNTS: [usize; 4] = [5, 10, 20, 40];
/// Empty-scan reporting fractions of the scenario 3b sweep.
pub const S3B_EMPTY_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Scenario configuration and network of a preset, with the variant applied.
pub fn build_scenario(preset: Preset, variant: Variant) -> Result<(ScenarioConfig, NetworkDocument), SimError> {
    let text = match preset {
        Preset::S1 => SCENARIO1,
        Preset::S2 => SCENARIO2,
        Preset::S3a => SCENARIO3A,
        Preset::S3b => SCENARIO3B,
    };
    let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
    if let Some(n) = variant.sensors {
        cfg.sensor_count = n;
    }
    if let Some(f) = variant.empty_scan_fraction {
        cfg.empty_scan_fraction = f;
    }
    let doc = builtin_network(&cfg.network)?;
    cfg.validate(&doc.build()?)?;
    Ok((cfg, doc))
}

/// Exact state of one live target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub id: u64,
    pub segment: SegmentId,
    pub position: f64,
    pub velocity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint {
    pub id: u64,
    pub segment: SegmentId,
    pub position: f64,
    pub velocity: f64,
    pub world: [f64; 2],
}

/// Live targets of one time step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub targets: Vec<TargetState>,
    next_id: u64,
}

impl GroundTruth {
    pub fn points(&self, net: &RoadNetwork<f64>) -> Vec<TruthPoint> {
        self.targets
            .iter()
            .map(|t| TruthPoint {
                id: t.id,
                segment: t.segment,
                position: t.position,
                velocity: t.velocity,
                world: net
                    .embed(t.segment, t.position)
                    .unwrap_or([f64::NAN; 2]),
            })
            .collect()
    }

    fn add(&mut self, segment: SegmentId, position: f64, velocity: f64) {
        self.targets.push(TargetState {
            id: self.next_id,
            segment,
            position,
            velocity,
        });
        self.next_id += 1;
    }
}

fn normal(mean: f64, sd: f64, rng: &mut Rng64) -> f64 {
    if sd > 0.0 {
        Normal::new(mean, sd).map_or(mean, |d| d.sample(rng))
    } else {
        mean
    }
}

fn poisson(rate: f64, rng: &mut Rng64) -> u64 {
    if rate > 0.0 {
        Poisson::new(rate).map_or(0, |d| d.sample(rng) as u64)
    } else {
        0
    }
}

fn sample_successor(net: &RoadNetwork<f64>, s: SegmentId, rng: &mut Rng64) -> Option<SegmentId> {
    let succ = net.successors(s).ok()?;
    if succ.is_empty() {
        return None;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(n, p) in succ {
        acc += p;
        if u < acc {
            return Some(n);
        }
    }
    succ.iter().rev().find(|(_, p)| *p > 0.0).map(|&(n, _)| n)
}

/// Uniform point over the total road length.
pub fn uniform_network_position(net: &RoadNetwork<f64>, rng: &mut Rng64) -> (SegmentId, f64) {
    let total = net.total_length();
    let mut u = rng.random::<f64>() * total;
    for s in net.segment_ids() {
        let len = net.length(s).unwrap_or(0.0);
        if u < len {
            return (s, u);
        }
        u -= len;
    }
    let last = SegmentId(net.len() - 1);
    (last, net.length(last).unwrap_or(0.0))
}

/// Initial ground truth: listed targets plus random ones.
pub fn initial_truth(cfg: &ScenarioConfig, net: &RoadNetwork<f64>, rng: &mut Rng64) -> GroundTruth {
    let mut truth = GroundTruth::default();
    for t in &cfg.initial_targets {
        let speed = t
            .speed
            .unwrap_or_else(|| normal(cfg.target_speed_mean, cfg.target_speed_sd, rng).abs());
        truth.add(SegmentId(t.segment), t.position, speed);
    }
    for _ in 0..cfg.random_initial_targets {
        let (s, p) = uniform_network_position(net, rng);
        let speed = normal(cfg.target_speed_mean, cfg.target_speed_sd, rng).abs();
        truth.add(s, p, speed);
    }
    truth
}

/// Advances every target by one constant-velocity step with sampled process
/// noise. Targets passing a segment end move to a sampled successor with the
/// finished length removed; targets reaching a sink, or moving backwards
/// past a segment start, are removed.
pub fn step_targets(truth: &mut GroundTruth, net: &RoadNetwork<f64>, dt: f64, q: f64, rng: &mut Rng64) {
    let targets = std::mem::take(&mut truth.targets);
    for mut t in targets {
        if q > 0.0 {
            // Exact discretization of white acceleration noise.
            let a = normal(0.0, 1.0, rng);
            let b = normal(0.0, 1.0, rng);
            let s11 = q * q * dt * dt * dt / 3.0;
            let s12 = q * q * dt * dt / 2.0;
            let s22 = q * q * dt;
            let l11 = s11.sqrt();
            let l21 = s12 / l11;
            let l22 = (s22 - l21 * l21).max(0.0).sqrt();
            t.position += t.velocity * dt + l11 * a;
            t.velocity += l21 * a + l22 * b;
        } else {
            t.position += t.velocity * dt;
        }
        if t.position < 0.0 && t.velocity < 0.0 {
            continue;
        }
        let mut alive = true;
        loop {
            let len = net.length(t.segment).unwrap_or(0.0);
            if t.position <= len {
                break;
            }
            match sample_successor(net, t.segment, rng) {
                Some(next) => {
                    t.position -= len;
                    t.segment = next;
                }
                None => {
                    alive = false;
                    break;
                }
            }
        }
        if alive {
            t.position = t.position.max(0.0);
            truth.targets.push(t);
        }
    }
}

/// Poisson births at uniform network positions, heading toward the segment end.
pub fn spawn_births(truth: &mut GroundTruth, cfg: &ScenarioConfig, net: &RoadNetwork<f64>, rng: &mut Rng64) {
    let n = poisson(cfg.births_per_step(), rng);
    for _ in 0..n {
        let (s, p) = uniform_network_position(net, rng);
        let speed = normal(cfg.target_speed_mean, cfg.target_speed_sd, rng).abs();
        truth.add(s, p, speed);
    }
}

/// A sensor driving along the network. It knows the segments it came from
/// and the segments it will drive onto next.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensor {
    pub id: usize,
    pub segment: SegmentId,
    pub along: f64,
    pub speed: f64,
    /// Previous segments, most recent first.
    pub trail: VecDeque<SegmentId>,
    /// Upcoming segments, next first.
    pub route: VecDeque<SegmentId>,
}

impl Sensor {
    /// Places a sensor uniformly on the network.
    pub fn spawn(id: usize, cfg: &ScenarioConfig, net: &RoadNetwork<f64>, rng: &mut Rng64) -> Self {
        let (segment, along) = uniform_network_position(net, rng);
        let speed = normal(cfg.sensor_speed_mean, cfg.sensor_speed_sd, rng).abs();
        let mut s = Self {
            id,
            segment,
            along,
            speed,
            trail: VecDeque::new(),
            route: VecDeque::new(),
        };
        s.fill_trail(net, cfg.fov_half_length, rng);
        s.fill_route(net, cfg.fov_half_length, rng);
        s
    }

    pub fn world(&self, net: &RoadNetwork<f64>) -> [f64; 2] {
        net.embed(self.segment, self.along).unwrap_or([f64::NAN; 2])
    }

    fn fill_trail(&mut self, net: &RoadNetwork<f64>, reach: f64, rng: &mut Rng64) {
        let mut covered = self.along;
        let mut at = self.trail.back().copied().unwrap_or(self.segment);
        for &s in &self.trail {
            covered += net.length(s).unwrap_or(0.0);
        }
        while covered < reach {
            let preds = match net.predecessors(at) {
                Ok(p) if !p.is_empty() => p,
                _ => break,
            };
            let pick = preds[rng.random_range(0..preds.len())];
            self.trail.push_back(pick);
            covered += net.length(pick).unwrap_or(0.0);
            at = pick;
        }
    }

    fn fill_route(&mut self, net: &RoadNetwork<f64>, reach: f64, rng: &mut Rng64) {
        let mut covered = net.length(self.segment).unwrap_or(0.0) - self.along;
        for &s in &self.route {
            covered += net.length(s).unwrap_or(0.0);
        }
        let mut at = self.route.back().copied().unwrap_or(self.segment);
        while covered < reach {
            match sample_successor(net, at, rng) {
                Some(next) => {
                    self.route.push_back(next);
                    covered += net.length(next).unwrap_or(0.0);
                    at = next;
                }
                None => break,
            }
        }
    }

    /// Drives one step. A sensor running off a sink reappears uniformly on
    /// the network.
    pub fn advance(&mut self, cfg: &ScenarioConfig, net: &RoadNetwork<f64>, rng: &mut Rng64) {
        self.along += self.speed * cfg.dt;
        loop {
            let len = net.length(self.segment).unwrap_or(0.0);
            if self.along <= len {
                break;
            }
            if self.route.is_empty() {
                self.fill_route(net, cfg.fov_half_length, rng);
            }
            match self.route.pop_front() {
                Some(next) => {
                    self.along -= len;
                    self.trail.push_front(self.segment);
                    self.segment = next;
                }
                None => {
                    *self = Sensor::spawn(self.id, cfg, net, rng);
                    return;
                }
            }
        }
        // Forget trail segments beyond the field of view.
        let mut covered = self.along;
        let mut keep = 0;
        for &s in &self.trail {
            if covered >= cfg.fov_half_length {
                break;
            }
            covered += net.length(s).unwrap_or(0.0);
            keep += 1;
        }
        self.trail.truncate(keep);
        self.fill_trail(net, cfg.fov_half_length, rng);
        self.fill_route(net, cfg.fov_half_length, rng);
    }
}

/// Along-road intervals within `half` meters behind and ahead of the
/// sensor, following its trail and route.
pub fn sensor_footprint(net: &RoadNetwork<f64>, sensor: &Sensor, half: f64) -> Vec<FootprintInterval<f64>> {
    let len = net.length(sensor.segment).unwrap_or(0.0);
    let mut out = vec![FootprintInterval {
        segment: sensor.segment,
        lo: (sensor.along - half).max(0.0),
        hi: (sensor.along + half).min(len),
    }];
    let mut ahead = half - (len - sensor.along);
    for &s in &sensor.route {
        if ahead <= 0.0 {
            break;
        }
        let l = net.length(s).unwrap_or(0.0);
        out.push(FootprintInterval {
            segment: s,
            lo: 0.0,
            hi: ahead.min(l),
        });
        ahead -= l;
    }
    let mut behind = half - sensor.along;
    for &s in &sensor.trail {
        if behind <= 0.0 {
            break;
        }
        let l = net.length(s).unwrap_or(0.0);
        out.push(FootprintInterval {
            segment: s,
            lo: (l - behind).max(0.0),
            hi: l,
        });
        behind -= l;
    }
    out
}

/// One scan of `sensor` at `time`.
pub fn generate_scan(
    time: u32,
    truth: &GroundTruth,
    sensor: &Sensor,
    cfg: &ScenarioConfig,
    net: &RoadNetwork<f64>,
    rng: &mut Rng64,
) -> Scan<f64> {
    let footprint = sensor_footprint(net, sensor, cfg.fov_half_length);
    let mut observations = Vec::new();
    for t in &truth.targets {
        let inside = footprint.iter().any(|f| f.contains(t.segment, t.position));
        if !inside {
            continue;
        }
        if rng.random::<f64>() < cfg.p_d {
            let position = normal(t.position, cfg.sigma, rng);
            let velocity = normal(t.velocity, cfg.sigma / 2.0, rng);
            observations.push(Observation::on_segment(t.segment, position, velocity));
        }
    }
    let total: f64 = footprint.iter().map(FootprintInterval::length).sum();
    let clutter = poisson(cfg.clutter_rate, rng);
    if total > 0.0 {
        for _ in 0..clutter {
            let mut u = rng.random::<f64>() * total;
            let mut placed = None;
            for f in &footprint {
                if u <= f.length() {
                    placed = Some((f.segment, f.lo + u));
                    break;
                }
                u -= f.length();
            }
            let (seg, pos) = placed.unwrap_or_else(|| {
                let f = footprint.last().expect("non-empty footprint");
                (f.segment, f.hi)
            });
            let vmax = cfg.clutter_speed_max;
            let vel = if vmax > 0.0 {
                rng.random_range(-vmax..=vmax)
            } else {
                0.0
            };
            observations.push(Observation::on_segment(seg, pos, vel));
        }
    }
    let is_reported = if observations.is_empty() {
        rng.random::<f64>() < cfg.empty_scan_fraction
    } else {
        true
    };
    Scan {
        time,
        sensor: sensor.id,
        sensor_segment: sensor.segment,
        sensor_along: sensor.along,
        sensor_position: sensor.world(net),
        footprint,
        observations,
        is_reported,
    }
}

/// Ground truth and scans of one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub time: u32,
    pub truth: Vec<TruthPoint>,
    pub scans: Vec<Scan<f64>>,
}

/// Stepwise scenario generator. Step 0 is the initial configuration; later
/// steps move targets, spawn births and move sensors before scanning.
pub struct Simulator<'a> {
    cfg: &'a ScenarioConfig,
    net: &'a RoadNetwork<f64>,
    rng: Rng64,
    truth: GroundTruth,
    sensors: Vec<Sensor>,
    time: u32,
    started: bool,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a ScenarioConfig, net: &'a RoadNetwork<f64>, mut rng: Rng64) -> Self {
        let truth = initial_truth(cfg, net, &mut rng);
        let sensors = (0..cfg.sensor_count)
            .map(|i| Sensor::spawn(i, cfg, net, &mut rng))
            .collect();
        Self {
            cfg,
            net,
            rng,
            truth,
            sensors,
            time: 0,
            started: false,
        }
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }
}

impl Iterator for Simulator<'_> {
    type Item = StepRecord;

    fn next(&mut self) -> Option<StepRecord> {
        if self.started {
            if self.time + 1 >= self.cfg.duration {
                return None;
            }
            self.time += 1;
            step_targets(
                &mut self.truth,
                self.net,
                self.cfg.dt,
                self.cfg.process_noise_q,
                &mut self.rng,
            );
            spawn_births(&mut self.truth, self.cfg, self.net, &mut self.rng);
            for s in &mut self.sensors {
                s.advance(self.cfg, self.net, &mut self.rng);
            }
        }
        self.started = true;
        let scans = self
            .sensors
            .iter()
            .map(|s| generate_scan(self.time, &self.truth, s, self.cfg, self.net, &mut self.rng))
            .collect();
        Some(StepRecord {
            time: self.time,
            truth: self.truth.points(self.net),
            scans,
        })
    }
}

/// Line-delimited record of the scenario stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamRecord {
    Header {
        duration: u32,
        #[serde(default)]
        scenario: String,
    },
    Truth {
        time: u32,
        id: u64,
        segment: SegmentId,
        position: f64,
        velocity: f64,
        world: [f64; 2],
    },
    Scan(ScanRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub position: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<f64>,
    pub belief: Vec<(SegmentId, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub time: u32,
    pub sensor: usize,
    pub sensor_segment: SegmentId,
    pub sensor_along: f64,
    pub sensor_position: [f64; 2],
    pub footprint: Vec<FootprintInterval<f64>>,
    pub observations: Vec<ObservationRecord>,
    pub is_reported: bool,
}

impl From<&Scan<f64>> for ScanRecord {
    fn from(s: &Scan<f64>) -> Self {
        Self {
            time: s.time,
            sensor: s.sensor,
            sensor_segment: s.sensor_segment,
            sensor_along: s.sensor_along,
            sensor_position: s.sensor_position,
            footprint: s.footprint.clone(),
            observations: s
                .observations
                .iter()
                .map(|o| ObservationRecord {
                    position: o.position,
                    velocity: o.velocity,
                    belief: o.segment_belief.clone(),
                })
                .collect(),
            is_reported: s.is_reported,
        }
    }
}

impl From<ScanRecord> for Scan<f64> {
    fn from(r: ScanRecord) -> Self {
        Self {
            time: r.time,
            sensor: r.sensor,
            sensor_segment: r.sensor_segment,
            sensor_along: r.sensor_along,
            sensor_position: r.sensor_position,
            footprint: r.footprint,
            observations: r
                .observations
                .into_iter()
                .map(|o| Observation {
                    position: o.position,
                    velocity: o.velocity,
                    segment_belief: o.belief,
                })
                .collect(),
            is_reported: r.is_reported,
        }
    }
}

/// Records of one step, truth first, then scans in sensor order.
pub fn step_records(step: &StepRecord) -> Vec<StreamRecord> {
    let mut out: Vec<StreamRecord> = step
        .truth
        .iter()
        .map(|t| StreamRecord::Truth {
            time: step.time,
            id: t.id,
            segment: t.segment,
            position: t.position,
            velocity: t.velocity,
            world: t.world,
        })
        .collect();
    out.extend(step.scans.iter().map(|s| StreamRecord::Scan(s.into())));
    out
}

/// Writes a whole stream as JSON lines.
pub fn write_stream<W: std::io::Write>(
    mut w: W,
    duration: u32,
    scenario: &str,
    steps: &[StepRecord],
) -> std::io::Result<()> {
    let header = StreamRecord::Header {
        duration,
        scenario: scenario.into(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for step in steps {
        for rec in step_records(step) {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed stream: duration, per-step truth (if any was recorded) and scans.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stream {
    pub duration: u32,
    pub has_truth: bool,
    pub steps: Vec<StepRecord>,
}

/// Reads a JSON-lines stream. Blank lines are skipped; anything else that
/// does not parse is reported with its 1-based line number. Records must be
/// in non-decreasing time order.
pub fn read_stream<R: std::io::BufRead>(r: R) -> Result<Stream, StreamError> {
    let mut duration: Option<u32> = None;
    let mut has_truth = false;
    let mut steps: Vec<StepRecord> = Vec::new();
    let step_for = |time: u32, line: usize, steps: &mut Vec<StepRecord>| -> Result<usize, StreamError> {
        let last = steps.last().map(|s| s.time);
        match last {
            Some(t) if t == time => Ok(steps.len() - 1),
            Some(t) if t > time => Err(StreamError::Malformed {
                line,
                message: format!("time {time} after time {t}"),
            }),
            _ => {
                steps.push(StepRecord {
                    time,
                    truth: Vec::new(),
                    scans: Vec::new(),
                });
                Ok(steps.len() - 1)
            }
        }
    };
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StreamRecord = serde_json::from_str(&line).map_err(|e| StreamError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        match rec {
            StreamRecord::Header { duration: d, .. } => duration = Some(d),
            StreamRecord::Truth {
                time,
                id,
                segment,
                position,
                velocity,
                world,
            } => {
                has_truth = true;
                let k = step_for(time, line_no, &mut steps)?;
                steps[k].truth.push(TruthPoint {
                    id,
                    segment,
                    position,
                    velocity,
                    world,
                });
            }
            StreamRecord::Scan(s) => {
                let k = step_for(s.time, line_no, &mut steps)?;
                steps[k].scans.push(s.into());
            }
        }
    }
    let duration = duration.unwrap_or_else(|| steps.last().map_or(0, |s| s.time + 1));
    Ok(Stream {
        duration,
        has_truth,
        steps,
    })
}
