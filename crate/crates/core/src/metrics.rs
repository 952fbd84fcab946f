//! GOSPA (α = 2) with its localization / missed / false decomposition, track
//! length statistics and Monte Carlo aggregation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{solve_assignment, CostMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("GOSPA cutoff c must be positive, got {0}")]
    Cutoff(f64),
    #[error("GOSPA exponent p must be at least 1, got {0}")]
    Exponent(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GospaParams {
    pub c: f64,
    pub p: f64,
}

impl Default for GospaParams {
    fn default() -> Self {
        Self { c: 8.0, p: 2.0 }
    }
}

impl GospaParams {
    pub fn new(c: f64, p: f64) -> Result<Self, MetricError> {
        let g = Self { c, p };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(MetricError::Cutoff(self.c));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(MetricError::Exponent(self.p));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GospaResult<T> {
    pub total: T,
    /// Σ d^p over matched pairs.
    pub localization: T,
    pub missed: usize,
    pub false_targets: usize,
}

fn distance<T: Scalar>(a: [T; 2], b: [T; 2]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// GOSPA distance between two finite point sets. Pairs at distance `c` or
/// more are counted as one miss plus one false target; the total is the
/// same either way.
pub fn gospa<T: Scalar>(truth: &[[T; 2]], est: &[[T; 2]], params: &GospaParams) -> GospaResult<T> {
    let c = T::lit(params.c);
    let p = T::lit(params.p);
    let cp = c.powf(p);
    let half = cp / T::lit(2.0);
    let (n, m) = (truth.len(), est.len());
    if n == 0 || m == 0 {
        let unmatched = T::lit((n + m) as f64);
        return GospaResult {
            total: (half * unmatched).powf(T::one() / p),
            localization: T::zero(),
            missed: n,
            false_targets: m,
        };
    }
    // Rows: truth then dummies; columns: estimates then dummies.
    let k = n + m;
    let mut rows = vec![vec![T::zero(); k]; k];
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = match (i < n, j < m) {
                (true, true) => distance(truth[i], est[j]).powf(p).min(cp),
                (true, false) | (false, true) => half,
                (false, false) => T::zero(),
            };
        }
    }
    let a = solve_assignment(&CostMatrix::from_dense(rows)).expect("dense square matrix is feasible");
    let mut localization = T::zero();
    let mut matched = 0;
    for (i, &j) in a.columns.iter().enumerate().take(n) {
        if j < m {
            let d = distance(truth[i], est[j]);
            if d < c {
                localization = localization + d.powf(p);
                matched += 1;
            }
        }
    }
    let unmatched = T::lit((n + m - 2 * matched) as f64);
    GospaResult {
        total: (localization + half * unmatched).powf(T::one() / p),
        localization,
        missed: n - matched,
        false_targets: m - matched,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackLengthStats {
    pub mean: f64,
    pub tracks: usize,
    /// No confirmed track was ever reported.
    pub empty: bool,
}

/// Mean number of steps each track id is reported. `reported[k]` lists the
/// ids reported at step k.
pub fn track_length_stats(reported: &[Vec<u64>]) -> TrackLengthStats {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for step in reported {
        for &id in step {
            *counts.entry(id).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return TrackLengthStats {
            mean: 0.0,
            tracks: 0,
            empty: true,
        };
    }
    let total: usize = counts.values().sum();
    TrackLengthStats {
        mean: total as f64 / counts.len() as f64,
        tracks: counts.len(),
        empty: false,
    }
}

/// Per-step record of one tracker run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub gospa: f64,
    pub localization: f64,
    pub missed: usize,
    pub false_targets: usize,
    pub tracks: usize,
    pub clusters: usize,
    pub global_hypotheses: usize,
}

/// Time sums of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub gospa: f64,
    pub localization: f64,
    pub missed: f64,
    pub false_targets: f64,
    pub track_length: f64,
    pub confirmed_tracks: usize,
    pub mean_tracks: f64,
    pub mean_clusters: f64,
    pub mean_global_hypotheses: f64,
}

pub fn run_metrics(steps: &[StepMetrics], lengths: &TrackLengthStats) -> RunMetrics {
    let n = steps.len();
    let mean = |f: fn(&StepMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            steps.iter().map(f).sum::<f64>() / n as f64
        }
    };
    RunMetrics {
        steps: n,
        gospa: steps.iter().map(|s| s.gospa).sum(),
        localization: steps.iter().map(|s| s.localization).sum(),
        missed: steps.iter().map(|s| s.missed as f64).sum(),
        false_targets: steps.iter().map(|s| s.false_targets as f64).sum(),
        track_length: lengths.mean,
        confirmed_tracks: lengths.tracks,
        mean_tracks: mean(|s| s.tracks as f64),
        mean_clusters: mean(|s| s.clusters as f64),
        mean_global_hypotheses: mean(|s| s.global_hypotheses as f64),
    }
}

/// Sum and per-run mean of one quantity over Monte Carlo runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sum: f64,
    pub mean: f64,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut sum = 0.0;
        let mut n = 0usize;
        for v in values {
            sum += v;
            n += 1;
        }
        Self {
            sum,
            mean: if n == 0 { 0.0 } else { sum / n as f64 },
        }
    }
}

/// One summary row over Monte Carlo runs. `localization` is the summed
/// GOSPA localization component (reported as NLE).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub gospa: Aggregate,
    pub localization: Aggregate,
    pub missed: Aggregate,
    pub false_targets: Aggregate,
    /// Mean over runs that confirmed at least one track.
    pub track_length: f64,
    pub mean_tracks: f64,
    pub mean_clusters: f64,
    pub mean_global_hypotheses: f64,
}

pub fn run_summary(runs: &[RunMetrics]) -> Summary {
    if runs.is_empty() {
        return Summary::default();
    }
    let with_tracks: Vec<f64> = runs
        .iter()
        .filter(|r| r.confirmed_tracks > 0)
        .map(|r| r.track_length)
        .collect();
    Summary {
        runs: runs.len(),
        gospa: Aggregate::of(runs.iter().map(|r| r.gospa)),
        localization: Aggregate::of(runs.iter().map(|r| r.localization)),
        missed: Aggregate::of(runs.iter().map(|r| r.missed)),
        false_targets: Aggregate::of(runs.iter().map(|r| r.false_targets)),
        track_length: Aggregate::of(with_tracks).mean,
        mean_tracks: Aggregate::of(runs.iter().map(|r| r.mean_tracks)).mean,
        mean_clusters: Aggregate::of(runs.iter().map(|r| r.mean_clusters)).mean,
        mean_global_hypotheses: Aggregate::of(runs.iter().map(|r| r.mean_global_hypotheses)).mean,
    }
}

fn resample_mean(values: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let n = values.len();
    (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_mean_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> (f64, f64) {
    if values.is_empty() || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples).map(|_| resample_mean(values, &mut rng)).collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let idx = |q: f64| ((q * (resamples - 1) as f64).round() as usize).min(resamples - 1);
    (means[idx(tail)], means[idx(1.0 - tail)])
}

/// Fraction of bootstrap resamples of the paired differences whose mean is
/// strictly negative, i.e. the confidence that `a` is lower than `b`.
pub fn bootstrap_confidence_less(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> f64 {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    if a.is_empty() || resamples == 0 {
        return 0.0;
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..resamples)
        .filter(|_| resample_mean(&diff, &mut rng) < 0.0)
        .count();
    hits as f64 / resamples as f64
}

/// Same as [`bootstrap_confidence_less`] for unpaired samples.
pub fn bootstrap_confidence_less_unpaired(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> f64 {
    if a.is_empty() || b.is_empty() || resamples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..resamples)
        .filter(|_| resample_mean(a, &mut rng) < resample_mean(b, &mut rng))
        .count();
    hits as f64 / resamples as f64
}
