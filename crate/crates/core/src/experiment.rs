//! Monte Carlo experiment runner and result files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::freespace::FreeSpaceFilter;
use crate::metrics::{
    gospa, run_metrics, run_summary, track_length_stats, GospaParams, MetricError, RunMetrics, StepMetrics, Summary,
};
use crate::mht::{ParamError, TrackFilter, Tracker, TrackerError, TrackerParams};
use crate::ncfilter::NetworkFilter;
use crate::network::{NetworkDocument, NetworkError, RoadNetwork};
use crate::sim::{build_scenario, Preset, Rng64, ScenarioConfig, SimError, Simulator, StepRecord, Variant};
use crate::statespace::{make_cv_model, make_obs_model, ModelError};

/// Ratio of the new-target to the false-alarm density used by the presets.
pub const DEFAULT_GAMMA_NT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Scenario(#[from] SimError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("tracker parameters ({which}): {source}")]
    Params {
        which: &'static str,
        #[source]
        source: ParamError,
    },
    #[error(transparent)]
    Gospa(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mc_runs must be at least 1")]
    NoRuns,
    #[error("override '{0}': expected key=value")]
    OverrideSyntax(String),
    #[error("override '{key}': {message}")]
    Override { key: String, message: String },
    #[error("config document: {0}")]
    Parse(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Nc,
    #[serde(alias = "fs")]
    Freespace,
    #[default]
    Both,
}

impl Mode {
    pub fn nc(self) -> bool {
        matches!(self, Mode::Nc | Mode::Both)
    }

    pub fn fs(self) -> bool {
        matches!(self, Mode::Freespace | Mode::Both)
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nc" => Ok(Mode::Nc),
            "freespace" | "fs" => Ok(Mode::Freespace),
            "both" => Ok(Mode::Both),
            _ => Err(format!("unknown mode '{s}' (expected nc, freespace or both)")),
        }
    }
}

/// Which tracker produced a result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackerKind {
    Nc,
    Fs,
}

impl TrackerKind {
    pub fn tag(self) -> &'static str {
        match self {
            TrackerKind::Nc => "nc",
            TrackerKind::Fs => "fs",
        }
    }
}

/// Fully resolved experiment configuration. Written out as the manifest
/// of every run and accepted back with `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output file prefix.
    pub label: String,
    pub mode: Mode,
    pub mc_runs: usize,
    pub seed: u64,
    /// Radius of the disc the free-space tracker assumes a sensor observes.
    pub fs_fov_radius: f64,
    pub scenario: ScenarioConfig,
    pub network: NetworkDocument,
    pub nc: TrackerParams,
    pub fs: TrackerParams,
    pub gospa: GospaParams,
}

/// Road-bound tracker parameters matching a scenario: clutter density over
/// the along-road footprint length.
pub fn nc_params_for(s: &ScenarioConfig) -> TrackerParams {
    let fa = s.clutter_rate / (2.0 * s.fov_half_length);
    TrackerParams {
        p_d: s.p_d,
        lambda_fa_density: fa,
        lambda_nt_density: DEFAULT_GAMMA_NT * fa,
        ..TrackerParams::default()
    }
}

/// Free-space tracker parameters: clutter density over the footprint disc.
pub fn fs_params_for(s: &ScenarioConfig, radius: f64) -> TrackerParams {
    let fa = s.clutter_rate / (std::f64::consts::PI * radius * radius);
    TrackerParams {
        p_d: s.p_d,
        lambda_fa_density: fa,
        lambda_nt_density: DEFAULT_GAMMA_NT * fa,
        ..TrackerParams::default()
    }
}

impl RunConfig {
    pub fn from_parts(label: String, scenario: ScenarioConfig, network: NetworkDocument) -> Self {
        let r = scenario.fov_half_length;
        Self {
            label,
            mode: Mode::Both,
            mc_runs: 50,
            seed: 0,
            fs_fov_radius: r,
            nc: nc_params_for(&scenario),
            fs: fs_params_for(&scenario, r),
            scenario,
            network,
            gospa: GospaParams::default(),
        }
    }

    /// Configuration of a preset. The label is `scenario<N>`, with the
    /// variant appended when one is set.
    pub fn preset(preset: Preset, variant: Variant) -> Result<Self, ConfigError> {
        let (scenario, network) = build_scenario(preset, variant)?;
        let mut label = format!("scenario{preset}");
        if let Some(n) = variant.sensors {
            write!(label, "_sensors{n}").ok();
        }
        if let Some(f) = variant.empty_scan_fraction {
            write!(label, "_empty{f}").ok();
        }
        Ok(Self::from_parts(label, scenario, network))
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<RoadNetwork<f64>, ConfigError> {
        if self.mc_runs == 0 {
            return Err(ConfigError::NoRuns);
        }
        let net = self.network.build::<f64>()?;
        self.scenario.validate(&net)?;
        self.nc
            .validate()
            .map_err(|source| ConfigError::Params { which: "nc", source })?;
        self.fs
            .validate()
            .map_err(|source| ConfigError::Params { which: "fs", source })?;
        self.gospa.validate()?;
        if !(self.fs_fov_radius > 0.0) {
            return Err(ConfigError::Override {
                key: "fs_fov_radius".into(),
                message: "must be positive".into(),
            });
        }
        make_cv_model(self.scenario.dt, self.scenario.process_noise_q)?;
        make_obs_model(self.scenario.sigma)?;
        Ok(net)
    }

    /// Applies `key.path=value`. The value is read as a TOML literal and
    /// falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::OverrideSyntax(assignment.into()))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.into()));
        let err = |message: String| ConfigError::Override {
            key: key.into(),
            message,
        };
        let mut doc = toml::Value::try_from(&*self).map_err(|e| err(e.to_string()))?;
        let mut parts = key.split('.').peekable();
        let mut node = &mut doc;
        while let Some(part) = parts.next() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| err(format!("'{part}' is not inside a table")))?;
            if parts.peek().is_none() {
                table.insert(part.into(), value);
                break;
            }
            node = table
                .get_mut(part)
                .ok_or_else(|| err(format!("unknown section '{part}'")))?;
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
        Ok(())
    }
}

/// Per-step metrics of one tracker over one replica.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerRun {
    pub steps: Vec<StepMetrics>,
    pub metrics: RunMetrics,
    /// Whether ground truth was available; GOSPA fields are zero otherwise.
    pub has_truth: bool,
}

/// Feeds the recorded scans to `tracker` step by step and scores the
/// confirmed tracks of the best global hypothesis after every step.
pub fn run_tracker<F: TrackFilter<f64>>(
    mut tracker: Tracker<f64, F>,
    steps: &[StepRecord],
    has_truth: bool,
    g: &GospaParams,
) -> Result<TrackerRun, TrackerError> {
    let mut out = Vec::with_capacity(steps.len());
    let mut reported = Vec::with_capacity(steps.len());
    for step in steps {
        tracker.advance_to(step.time)?;
        for scan in &step.scans {
            tracker.process_scan(scan)?;
        }
        let tracks = tracker.best_global();
        let tele = tracker.telemetry();
        let mut m = StepMetrics {
            tracks: tracks.len(),
            clusters: tele.clusters,
            global_hypotheses: tele.global_hypotheses,
            ..StepMetrics::default()
        };
        if has_truth {
            let truth: Vec<[f64; 2]> = step.truth.iter().map(|t| t.world).collect();
            let est: Vec<[f64; 2]> = tracks.iter().map(|t| t.world).collect();
            let r = gospa(&truth, &est, g);
            m.gospa = r.total;
            m.localization = r.localization;
            m.missed = r.missed;
            m.false_targets = r.false_targets;
        }
        reported.push(tracks.iter().map(|t| t.tree.0).collect());
        out.push(m);
    }
    let lengths = track_length_stats(&reported);
    Ok(TrackerRun {
        metrics: run_metrics(&out, &lengths),
        steps: out,
        has_truth,
    })
}

/// Builds both trackers for a validated configuration.
pub struct TrackerFactory {
    net: Arc<RoadNetwork<f64>>,
    cfg: RunConfig,
}

impl TrackerFactory {
    pub fn new(cfg: &RunConfig) -> Result<Self, ConfigError> {
        let net = cfg.validate()?;
        Ok(Self {
            net: Arc::new(net),
            cfg: cfg.clone(),
        })
    }

    pub fn network(&self) -> &RoadNetwork<f64> {
        &self.net
    }

    pub fn nc(&self) -> Result<Tracker<f64, NetworkFilter<f64>>, RunError> {
        let s = &self.cfg.scenario;
        let filter = NetworkFilter::new(
            self.net.clone(),
            make_cv_model(s.dt, s.process_noise_q).map_err(ConfigError::from)?,
            make_obs_model(s.sigma).map_err(ConfigError::from)?,
        );
        Ok(Tracker::new(filter, self.cfg.nc.clone())?)
    }

    pub fn fs(&self) -> Result<Tracker<f64, FreeSpaceFilter<f64>>, RunError> {
        let s = &self.cfg.scenario;
        let filter = FreeSpaceFilter::new(
            self.net.clone(),
            s.dt,
            s.process_noise_q,
            s.sigma,
            self.cfg.fs_fov_radius,
        )
        .map_err(ConfigError::from)?;
        Ok(Tracker::new(filter, self.cfg.fs.clone())?)
    }

    /// Runs the trackers selected by the mode over one recorded replica.
    pub fn run_replica(
        &self,
        steps: &[StepRecord],
        has_truth: bool,
    ) -> Result<(Option<TrackerRun>, Option<TrackerRun>), RunError> {
        let g = &self.cfg.gospa;
        let nc = if self.cfg.mode.nc() {
            Some(run_tracker(self.nc()?, steps, has_truth, g)?)
        } else {
            None
        };
        let fs = if self.cfg.mode.fs() {
            Some(run_tracker(self.fs()?, steps, has_truth, g)?)
        } else {
            None
        };
        Ok((nc, fs))
    }
}

/// Seed of replica `index`.
pub fn replica_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// Simulated scenario of replica `index`.
pub fn simulate_replica(cfg: &RunConfig, net: &RoadNetwork<f64>, index: usize) -> Vec<StepRecord> {
    let rng = Rng64::seed_from_u64(replica_seed(cfg.seed, index));
    Simulator::new(&cfg.scenario, net, rng).collect()
}

/// All replicas of one tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerResults {
    pub kind: TrackerKind,
    pub runs: Vec<TrackerRun>,
    pub summary: Summary,
}

impl TrackerResults {
    fn new(kind: TrackerKind, runs: Vec<TrackerRun>) -> Self {
        let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics).collect();
        Self {
            kind,
            summary: run_summary(&metrics),
            runs,
        }
    }

    /// One value per run.
    pub fn per_run(&self, f: impl Fn(&RunMetrics) -> f64) -> Vec<f64> {
        self.runs.iter().map(|r| f(&r.metrics)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResults {
    pub config: RunConfig,
    pub nc: Option<TrackerResults>,
    pub fs: Option<TrackerResults>,
}

impl ExperimentResults {
    pub fn from_runs(config: RunConfig, runs: Vec<(Option<TrackerRun>, Option<TrackerRun>)>) -> Self {
        let (nc, fs): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        let collect = |kind, v: Vec<Option<TrackerRun>>| {
            let v: Option<Vec<TrackerRun>> = v.into_iter().collect();
            v.map(|runs| TrackerResults::new(kind, runs))
        };
        Self {
            nc: collect(TrackerKind::Nc, nc),
            fs: collect(TrackerKind::Fs, fs),
            config,
        }
    }

    pub fn trackers(&self) -> impl Iterator<Item = &TrackerResults> {
        self.nc.iter().chain(self.fs.iter())
    }
}

/// Runs all Monte Carlo replicas on the current rayon pool. Each replica
/// draws from its own seed, so results do not depend on the worker count.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResults, RunError> {
    let factory = TrackerFactory::new(cfg)?;
    let runs = (0..cfg.mc_runs)
        .into_par_iter()
        .map(|i| {
            let steps = simulate_replica(cfg, factory.network(), i);
            factory.run_replica(&steps, true)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentResults::from_runs(cfg.clone(), runs))
}

const SUMMARY_HEADER: &str = "tracker,runs,gospa_sum,gospa_mean,nle_sum,nle_mean,missed_sum,missed_mean,\
false_sum,false_mean,track_length,mean_tracks,mean_clusters,mean_global_hypotheses";

fn summary_csv(kind: TrackerKind, s: &Summary) -> String {
    format!(
        "{SUMMARY_HEADER}\n{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        kind.tag(),
        s.runs,
        s.gospa.sum,
        s.gospa.mean,
        s.localization.sum,
        s.localization.mean,
        s.missed.sum,
        s.missed.mean,
        s.false_targets.sum,
        s.false_targets.mean,
        s.track_length,
        s.mean_tracks,
        s.mean_clusters,
        s.mean_global_hypotheses
    )
}

fn runs_csv(r: &TrackerResults) -> String {
    let mut out = String::from(
        "run,steps,gospa,nle,missed,false,track_length,confirmed_tracks,mean_tracks,mean_clusters,mean_global_hypotheses\n",
    );
    for (i, run) in r.runs.iter().enumerate() {
        let m = &run.metrics;
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{},{},{}",
            m.steps,
            m.gospa,
            m.localization,
            m.missed,
            m.false_targets,
            m.track_length,
            m.confirmed_tracks,
            m.mean_tracks,
            m.mean_clusters,
            m.mean_global_hypotheses
        )
        .ok();
    }
    out
}

fn series_csv(r: &TrackerResults) -> String {
    let mut out = String::from("run,step,metric,value\n");
    for (i, run) in r.runs.iter().enumerate() {
        for (k, s) in run.steps.iter().enumerate() {
            if run.has_truth {
                writeln!(out, "{i},{k},gospa,{}", s.gospa).ok();
                writeln!(out, "{i},{k},nle,{}", s.localization).ok();
                writeln!(out, "{i},{k},missed,{}", s.missed).ok();
                writeln!(out, "{i},{k},false,{}", s.false_targets).ok();
            }
            writeln!(out, "{i},{k},tracks,{}", s.tracks).ok();
            writeln!(out, "{i},{k},clusters,{}", s.clusters).ok();
            writeln!(out, "{i},{k},global_hypotheses,{}", s.global_hypotheses).ok();
        }
    }
    out
}

#[derive(Serialize)]
struct SummaryDocument<'a> {
    label: &'a str,
    tracker: &'a str,
    has_truth: bool,
    #[serde(flatten)]
    summary: &'a Summary,
}

/// Writes `<label>_<tracker>_{summary.csv,summary.json,runs.csv,series.csv}`
/// and `<label>_manifest.toml` into `dir`. Returns the written paths.
pub fn write_outputs(results: &ExperimentResults, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let label = &results.config.label;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> io::Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    for r in results.trackers() {
        let tag = r.kind.tag();
        let has_truth = r.runs.iter().all(|x| x.has_truth);
        if has_truth {
            put(format!("{label}_{tag}_summary.csv"), summary_csv(r.kind, &r.summary))?;
        }
        let doc = SummaryDocument {
            label,
            tracker: tag,
            has_truth,
            summary: &r.summary,
        };
        let json = serde_json::to_string_pretty(&doc).map_err(io::Error::other)?;
        put(format!("{label}_{tag}_summary.json"), json + "\n")?;
        put(format!("{label}_{tag}_runs.csv"), runs_csv(r))?;
        put(format!("{label}_{tag}_series.csv"), series_csv(r))?;
    }
    put(format!("{label}_manifest.toml"), results.config.to_toml())?;
    Ok(written)
}
