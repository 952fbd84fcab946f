//! Track-oriented multiple hypothesis tracker.
//!
//! Each potential target is a tree whose leaves are alternative histories.
//! Leaves carry a log-likelihood-ratio score against the false-alarm
//! hypothesis. Trees that compete for observations live in a cluster, and
//! each cluster keeps its own ranked list of global hypotheses: consistent
//! selections of at most one leaf per tree, scored by the sum of their leaf
//! scores. The single-track filter is pluggable through [`TrackFilter`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{
    assemble_costs, build_clusters, decode, MurtyIter, ObservationFate, ScoreIncrements,
};
use crate::network::{NetworkError, SegmentId};
use crate::scalar::Scalar;
use crate::statespace::{Observation, Scan};

/// Single-target filtering used by the tracker.
pub trait TrackFilter<T: Scalar> {
    type State: Clone + fmt::Debug;

    /// Time update over one step. Each entry carries the log probability of
    /// its discrete branch; an empty result means the target left.
    fn predict(&self, s: &Self::State) -> Vec<(Self::State, T)>;

    /// Alternative discrete interpretations of a state close to a junction,
    /// the original first. A single entry means no split.
    fn split(&self, s: &Self::State) -> Vec<(Self::State, T)> {
        vec![(s.clone(), T::zero())]
    }

    /// Gates the observation and, if it passes, returns the posterior and
    /// the log likelihood of the observation (including any discrete
    /// belief factor).
    fn associate(&self, s: &Self::State, obs: &Observation<T>) -> Option<(Self::State, T)>;

    /// State of a track started from one observation.
    fn initiate(&self, obs: &Observation<T>) -> Option<Self::State>;

    /// Whether the sensor that produced `scan` could have seen the target.
    fn in_footprint(&self, s: &Self::State, scan: &Scan<T>) -> bool;

    fn world_position(&self, s: &Self::State) -> [T; 2];

    fn segment(&self, _s: &Self::State) -> Option<SegmentId> {
        None
    }

    /// Mean and row-major covariance, for snapshots.
    fn moments(&self, s: &Self::State) -> (Vec<T>, Vec<T>);

    /// Rejects scans that reference things the filter does not know.
    fn check_scan(&self, _scan: &Scan<T>) -> Result<(), NetworkError> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Split only when an observation of the current scan gates a copy.
    #[default]
    WhenNeeded,
    AlwaysSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    pub p_d: f64,
    pub p_s: f64,
    /// False alarms per meter (road-bound) or per m² (free space).
    pub lambda_fa_density: f64,
    /// New targets per meter (or m²) per scan.
    pub lambda_nt_density: f64,
    /// Initial likelihood ratio of a new track; defaults to
    /// `lambda_nt_density / lambda_fa_density`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_nt: Option<f64>,
    pub max_hyp_per_cluster: usize,
    pub min_rel_score: f64,
    pub nscan: u32,
    pub confirm_hits: u32,
    pub termination_score: f64,
    pub split_policy: SplitPolicy,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            p_d: 0.95,
            p_s: 1.0,
            lambda_fa_density: 0.01,
            lambda_nt_density: 0.001,
            gamma_nt: None,
            max_hyp_per_cluster: 50,
            min_rel_score: 4.0,
            nscan: 3,
            confirm_hits: 2,
            termination_score: -4.0,
            split_policy: SplitPolicy::WhenNeeded,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("{name} must lie in (0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("{name} must be positive, got {value}")]
    Positive { name: &'static str, value: f64 },
    #[error("{name} must be at least 1")]
    Count { name: &'static str },
    #[error("{name} must not be NaN")]
    NotANumber { name: &'static str },
}

impl TrackerParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        for (name, value) in [("p_d", self.p_d), ("p_s", self.p_s)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(ParamError::Probability { name, value });
            }
        }
        if !(self.lambda_fa_density > 0.0) {
            return Err(ParamError::Positive {
                name: "lambda_fa_density",
                value: self.lambda_fa_density,
            });
        }
        if !(self.lambda_nt_density >= 0.0) {
            return Err(ParamError::Positive {
                name: "lambda_nt_density",
                value: self.lambda_nt_density,
            });
        }
        if let Some(g) = self.gamma_nt {
            if !(g > 0.0) {
                return Err(ParamError::Positive {
                    name: "gamma_nt",
                    value: g,
                });
            }
        } else if self.lambda_nt_density <= 0.0 {
            return Err(ParamError::Positive {
                name: "lambda_nt_density",
                value: self.lambda_nt_density,
            });
        }
        if self.max_hyp_per_cluster == 0 {
            return Err(ParamError::Count {
                name: "max_hyp_per_cluster",
            });
        }
        if self.confirm_hits == 0 {
            return Err(ParamError::Count {
                name: "confirm_hits",
            });
        }
        if self.min_rel_score.is_nan() {
            return Err(ParamError::NotANumber {
                name: "min_rel_score",
            });
        }
        if self.termination_score.is_nan() {
            return Err(ParamError::NotANumber {
                name: "termination_score",
            });
        }
        Ok(())
    }

    pub fn gamma_nt_value(&self) -> f64 {
        self.gamma_nt
            .unwrap_or(self.lambda_nt_density / self.lambda_fa_density)
    }
}

/// `ℓ + ln P_S + ln p(δ'|δ)`.
pub fn score_predict<T: Scalar>(parent: T, p_s: T, log_transition: T) -> T {
    parent + p_s.ln() + log_transition
}

/// Miss: `ℓ + ln(1 − P_D)`. Hit with Gaussian likelihood `N` and segment
/// belief `b`: `ℓ + ln(P_D N b / λ_fa)`.
pub fn score_update<T: Scalar>(
    parent: T,
    p_d: T,
    lambda_fa_density: T,
    detection: Option<(T, T)>,
) -> T {
    match detection {
        None => parent + (T::one() - p_d).ln(),
        Some((likelihood, belief)) => parent + (p_d * likelihood * belief / lambda_fa_density).ln(),
    }
}

/// `e^ℓ / (1 + e^ℓ)` without overflow.
pub fn existence_probability<T: Scalar>(score: T) -> T {
    if score >= T::zero() {
        T::one() / (T::one() + (-score).exp())
    } else {
        let e = score.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreeId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeafId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObsId(pub u64);

impl fmt::Display for TreeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Birth(ObsId),
    Hit(ObsId),
    Miss,
    Predict,
    Split,
}

impl Event {
    pub fn observation(&self) -> Option<ObsId> {
        match *self {
            Event::Birth(o) | Event::Hit(o) => Some(o),
            _ => None,
        }
    }
}

/// One step of a leaf's ancestry. Leaves that share a node share all history
/// up to it.
#[derive(Debug)]
pub struct HistoryNode<T> {
    pub time: u32,
    pub event: Event,
    pub segment: Option<SegmentId>,
    pub increment: T,
    parent: Option<Arc<HistoryNode<T>>>,
}

impl<T> HistoryNode<T> {
    pub fn parent(&self) -> Option<&Arc<HistoryNode<T>>> {
        self.parent.as_ref()
    }

    /// Nodes from this one back to the root.
    pub fn ancestry(&self) -> impl Iterator<Item = &HistoryNode<T>> {
        std::iter::successors(Some(self), |n| n.parent.as_deref())
    }
}

impl<T> Drop for HistoryNode<T> {
    // Long chains would otherwise drop recursively.
    fn drop(&mut self) {
        let mut next = self.parent.take();
        while let Some(node) = next {
            match Arc::try_unwrap(node) {
                Ok(mut n) => next = n.parent.take(),
                Err(_) => break,
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Leaf<S, T> {
    pub id: LeafId,
    pub tree: TreeId,
    pub state: S,
    pub score: T,
    pub hits: u32,
    pub history: Arc<HistoryNode<T>>,
    split_time: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
struct Hypothesis<T> {
    /// Sorted ascending.
    leaves: Vec<LeafId>,
    log_prob: T,
}

#[derive(Clone, Debug)]
struct Cluster<T> {
    hyps: Vec<Hypothesis<T>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("scan time {got} is before the tracker time {now}")]
    TimeReversal { now: u32, got: u32 },
    #[error("scan references an unknown network element: {0}")]
    Input(#[from] NetworkError),
    #[error(transparent)]
    Params(#[from] ParamError),
}

/// One track of the best global hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportedTrack<S, T> {
    pub tree: TreeId,
    pub leaf: LeafId,
    pub state: S,
    pub world: [T; 2],
    pub segment: Option<SegmentId>,
    pub score: T,
    pub existence: T,
    pub hits: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Telemetry {
    pub time: u32,
    pub trees: usize,
    pub leaves: usize,
    pub clusters: usize,
    pub global_hypotheses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub time: u32,
    pub event: Event,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment: Option<SegmentId>,
    pub increment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafSnapshot {
    pub id: LeafId,
    pub tree: TreeId,
    pub score: f64,
    pub hits: u32,
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment: Option<SegmentId>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSnapshot {
    pub leaves: Vec<LeafId>,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub trees: Vec<TreeId>,
    pub hypotheses: Vec<HypothesisSnapshot>,
}

/// Complete tracker state as plain data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerSnapshot {
    pub time: Option<u32>,
    pub leaves: Vec<LeafSnapshot>,
    pub clusters: Vec<ClusterSnapshot>,
}

/// How a child leaf derives from its parent within one scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum ChildKey {
    Hit(LeafId, usize),
    Miss(LeafId),
    Birth(usize),
}

struct ScanContext<S, T> {
    time: u32,
    obs_ids: Vec<ObsId>,
    /// Posterior and hit increment for every gated (leaf, observation).
    gated: HashMap<(LeafId, usize), (S, T)>,
    /// Increment for an unassigned leaf: `ln(1 − P_D)` inside the footprint.
    miss: HashMap<LeafId, T>,
    births: Vec<Option<S>>,
    memo: HashMap<ChildKey, LeafId>,
    birth_trees: HashMap<usize, TreeId>,
}

/// Total order on scalars for ranking; NaN compares equal.
#[derive(Clone, Copy, Debug)]
struct Rank<T>(T);

impl<T: Scalar> PartialEq for Rank<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Rank<T> {}

impl<T: Scalar> PartialOrd for Rank<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Rank<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.partial_cmp(&other.0).unwrap_or(Ordering::Equal)
    }
}

fn hyp_order<T: Scalar>(a: &Hypothesis<T>, b: &Hypothesis<T>) -> Ordering {
    Rank(b.log_prob)
        .cmp(&Rank(a.log_prob))
        .then_with(|| a.leaves.cmp(&b.leaves))
}

pub struct Tracker<T: Scalar, F: TrackFilter<T>> {
    filter: F,
    params: TrackerParams,
    time: Option<u32>,
    leaves: BTreeMap<LeafId, Leaf<F::State, T>>,
    clusters: Vec<Cluster<T>>,
    next_leaf: u64,
    next_tree: u64,
    next_obs: u64,
    ln_p_d: T,
    ln_miss: T,
    ln_p_s: T,
    ln_lambda_fa: T,
    ln_gamma_nt: T,
}

impl<T: Scalar, F: TrackFilter<T>> Tracker<T, F> {
    pub fn new(filter: F, params: TrackerParams) -> Result<Self, TrackerError> {
        params.validate()?;
        let lit = |v: f64| T::lit(v);
        Ok(Self {
            ln_p_d: lit(params.p_d).ln(),
            ln_miss: (T::one() - lit(params.p_d)).ln(),
            ln_p_s: lit(params.p_s).ln(),
            ln_lambda_fa: lit(params.lambda_fa_density).ln(),
            ln_gamma_nt: lit(params.gamma_nt_value()).ln(),
            filter,
            params,
            time: None,
            leaves: BTreeMap::new(),
            clusters: Vec::new(),
            next_leaf: 0,
            next_tree: 0,
            next_obs: 0,
        })
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn filter(&self) -> &F {
        &self.filter
    }

    pub fn time(&self) -> Option<u32> {
        self.time
    }

    pub fn leaf(&self, id: LeafId) -> Option<&Leaf<F::State, T>> {
        self.leaves.get(&id)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Leaf<F::State, T>> {
        self.leaves.values()
    }

    /// Initial score of a new track, `ln γ_nt`.
    pub fn new_track_score(&self) -> T {
        self.ln_gamma_nt
    }

    /// Global hypotheses of every cluster as (leaves, log probability), best
    /// first within each cluster.
    pub fn global_hypotheses(&self) -> Vec<Vec<(Vec<LeafId>, T)>> {
        self.clusters
            .iter()
            .map(|c| {
                c.hyps
                    .iter()
                    .map(|h| (h.leaves.clone(), h.log_prob))
                    .collect()
            })
            .collect()
    }

    /// Runs the time update up to `time`, one step at a time.
    pub fn advance_to(&mut self, time: u32) -> Result<(), TrackerError> {
        match self.time {
            None => self.time = Some(time),
            Some(now) if time < now => return Err(TrackerError::TimeReversal { now, got: time }),
            Some(now) => {
                for t in now + 1..=time {
                    self.time = Some(t);
                    self.predict_step(t);
                }
            }
        }
        Ok(())
    }

    /// Processes one sensor scan. The time update runs first if the scan is
    /// the first of a new time step. Scans not flagged as reported are
    /// ignored apart from that.
    pub fn process_scan(&mut self, scan: &Scan<T>) -> Result<(), TrackerError> {
        self.filter.check_scan(scan)?;
        self.advance_to(scan.time)?;
        if !scan.is_reported {
            return Ok(());
        }
        let time = scan.time;
        self.split_stage(scan, time);

        let obs_ids: Vec<ObsId> = scan
            .observations
            .iter()
            .map(|_| {
                let id = ObsId(self.next_obs);
                self.next_obs += 1;
                id
            })
            .collect();

        let mut ctx = ScanContext {
            time,
            obs_ids,
            gated: HashMap::new(),
            miss: HashMap::new(),
            births: scan
                .observations
                .iter()
                .map(|o| self.filter.initiate(o))
                .collect(),
            memo: HashMap::new(),
            birth_trees: HashMap::new(),
        };
        for (id, leaf) in &self.leaves {
            let miss = if self.filter.in_footprint(&leaf.state, scan) {
                self.ln_miss
            } else {
                T::zero()
            };
            ctx.miss.insert(*id, miss);
            for (j, obs) in scan.observations.iter().enumerate() {
                if let Some((post, ln_lik)) = self.filter.associate(&leaf.state, obs) {
                    let inc = self.ln_p_d + ln_lik - self.ln_lambda_fa;
                    ctx.gated.insert((*id, j), (post, inc));
                }
            }
        }

        // Clusters sharing a gated observation are merged.
        let mut leaf_cluster: HashMap<LeafId, usize> = HashMap::new();
        for (ci, c) in self.clusters.iter().enumerate() {
            for h in &c.hyps {
                for &l in &h.leaves {
                    leaf_cluster.insert(l, ci);
                }
            }
        }
        let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(leaf, j) in ctx.gated.keys() {
            if let Some(&ci) = leaf_cluster.get(&leaf) {
                pairs.insert((ci, j));
            }
        }
        let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
        let cluster_ids: Vec<usize> = (0..self.clusters.len()).collect();
        let obs_idx: Vec<usize> = (0..scan.observations.len()).collect();
        let partition = build_clusters(&cluster_ids, &obs_idx, &pairs);

        let mut old: Vec<Option<Cluster<T>>> =
            std::mem::take(&mut self.clusters).into_iter().map(Some).collect();
        let mut work: Vec<(Cluster<T>, Vec<usize>)> = Vec::new();
        for group in &partition.clusters {
            let mut merged: Option<Cluster<T>> = None;
            for &ci in &group.track_tree_ids {
                let c = old[ci].take().expect("cluster used once");
                merged = Some(match merged {
                    None => c,
                    Some(m) => self.merge_clusters(m, c),
                });
            }
            let obs: Vec<usize> = group.observation_ids.iter().copied().collect();
            work.push((merged.expect("non-empty group"), obs));
        }
        for &j in &partition.unclaimed_observations {
            let empty = Cluster {
                hyps: vec![Hypothesis {
                    leaves: Vec::new(),
                    log_prob: T::zero(),
                }],
            };
            work.push((empty, vec![j]));
        }

        let mut next = Vec::with_capacity(work.len());
        for (cluster, obs) in work {
            let touched = !obs.is_empty()
                || cluster
                    .hyps
                    .iter()
                    .flat_map(|h| &h.leaves)
                    .any(|l| ctx.miss.get(l).is_some_and(|m| *m != T::zero()));
            let updated = if touched {
                self.assign_cluster(cluster, &obs, &mut ctx)
            } else {
                cluster
            };
            next.push(updated);
        }
        self.clusters = next;
        self.prune_all();
        Ok(())
    }

    /// Tracks of the best global hypothesis with at least `confirm_hits`
    /// associated observations, ordered by tree id.
    pub fn best_global(&self) -> Vec<ReportedTrack<F::State, T>> {
        let mut out = Vec::new();
        for c in &self.clusters {
            let Some(best) = c.hyps.first() else { continue };
            for id in &best.leaves {
                let leaf = &self.leaves[id];
                if leaf.hits < self.params.confirm_hits {
                    continue;
                }
                out.push(ReportedTrack {
                    tree: leaf.tree,
                    leaf: leaf.id,
                    state: leaf.state.clone(),
                    world: self.filter.world_position(&leaf.state),
                    segment: self.filter.segment(&leaf.state),
                    score: leaf.score,
                    existence: existence_probability(leaf.score),
                    hits: leaf.hits,
                });
            }
        }
        out.sort_by_key(|r| r.tree);
        out
    }

    pub fn telemetry(&self) -> Telemetry {
        let trees: BTreeSet<TreeId> = self.leaves.values().map(|l| l.tree).collect();
        Telemetry {
            time: self.time.unwrap_or(0),
            trees: trees.len(),
            leaves: self.leaves.len(),
            clusters: self.clusters.len(),
            global_hypotheses: self.clusters.iter().map(|c| c.hyps.len()).sum(),
        }
    }

    pub fn snapshot(&self) -> TrackerSnapshot {
        let leaves = self
            .leaves
            .values()
            .map(|l| {
                let (mean, cov) = self.filter.moments(&l.state);
                let mut history: Vec<HistoryEntry> = l
                    .history
                    .ancestry()
                    .map(|n| HistoryEntry {
                        time: n.time,
                        event: n.event,
                        segment: n.segment,
                        increment: n.increment.as_f64(),
                    })
                    .collect();
                history.reverse();
                LeafSnapshot {
                    id: l.id,
                    tree: l.tree,
                    score: l.score.as_f64(),
                    hits: l.hits,
                    mean: mean.into_iter().map(Scalar::as_f64).collect(),
                    covariance: cov.into_iter().map(Scalar::as_f64).collect(),
                    segment: self.filter.segment(&l.state),
                    history,
                }
            })
            .collect();
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let trees: BTreeSet<TreeId> = c
                    .hyps
                    .iter()
                    .flat_map(|h| &h.leaves)
                    .map(|l| self.leaves[l].tree)
                    .collect();
                ClusterSnapshot {
                    trees: trees.into_iter().collect(),
                    hypotheses: c
                        .hyps
                        .iter()
                        .map(|h| HypothesisSnapshot {
                            leaves: h.leaves.clone(),
                            log_prob: h.log_prob.as_f64(),
                        })
                        .collect(),
                }
            })
            .collect();
        TrackerSnapshot {
            time: self.time,
            leaves,
            clusters,
        }
    }

    /// Checks the structural invariants: every hypothesis holds at most one
    /// leaf per tree, no observation explains two of its leaves, its
    /// log-probability is the sum of its leaf scores, every leaf score equals
    /// the sum of its history increments, and no tree spans two clusters.
    pub fn check_invariants(&self) -> Result<(), String> {
        let tol = T::lit(1e-9);
        let mut tree_cluster: HashMap<TreeId, usize> = HashMap::new();
        for (ci, c) in self.clusters.iter().enumerate() {
            if c.hyps.is_empty() {
                return Err(format!("cluster {ci} has no hypothesis"));
            }
            for h in &c.hyps {
                let mut trees = BTreeSet::new();
                let mut obs = BTreeSet::new();
                let mut sum = T::zero();
                for id in &h.leaves {
                    let leaf = self
                        .leaves
                        .get(id)
                        .ok_or_else(|| format!("hypothesis references missing leaf {id:?}"))?;
                    sum += leaf.score;
                    if !trees.insert(leaf.tree) {
                        return Err(format!("tree {} twice in one hypothesis", leaf.tree));
                    }
                    if let Some(&other) = tree_cluster.get(&leaf.tree) {
                        if other != ci {
                            return Err(format!("tree {} in clusters {other} and {ci}", leaf.tree));
                        }
                    }
                    tree_cluster.insert(leaf.tree, ci);
                    for n in leaf.history.ancestry() {
                        if let Some(o) = n.event.observation() {
                            if !obs.insert(o) {
                                return Err(format!("observation {o:?} used twice"));
                            }
                        }
                    }
                }
                if (sum - h.log_prob).abs() > tol * (T::one() + sum.abs()) {
                    return Err("hypothesis log-probability is not the sum of scores".into());
                }
            }
        }
        for leaf in self.leaves.values() {
            let total: T = leaf.history.ancestry().map(|n| n.increment).sum();
            if (total - leaf.score).abs() > tol * (T::one() + total.abs()) {
                return Err(format!(
                    "leaf {:?} score {} differs from its history sum {}",
                    leaf.id, leaf.score, total
                ));
            }
        }
        Ok(())
    }

    fn alloc_leaf(&mut self) -> LeafId {
        let id = LeafId(self.next_leaf);
        self.next_leaf += 1;
        id
    }

    fn alloc_tree(&mut self) -> TreeId {
        let id = TreeId(self.next_tree);
        self.next_tree += 1;
        id
    }

    fn child_leaf(
        &mut self,
        parent: LeafId,
        state: F::State,
        increment: T,
        event: Event,
        time: u32,
    ) -> LeafId {
        let id = self.alloc_leaf();
        let p = &self.leaves[&parent];
        let node = HistoryNode {
            time,
            event,
            segment: self.filter.segment(&state),
            increment,
            parent: Some(p.history.clone()),
        };
        let hit = matches!(event, Event::Hit(_)) as u32;
        let leaf = Leaf {
            id,
            tree: p.tree,
            score: p.score + increment,
            hits: p.hits + hit,
            split_time: p.split_time,
            state,
            history: Arc::new(node),
        };
        self.leaves.insert(id, leaf);
        id
    }

    fn predict_step(&mut self, time: u32) {
        let ids: Vec<LeafId> = self.leaves.keys().copied().collect();
        let mut replace: HashMap<LeafId, Vec<LeafId>> = HashMap::new();
        for id in ids {
            let branches = self.filter.predict(&self.leaves[&id].state);
            if branches.is_empty() {
                replace.insert(id, Vec::new());
                continue;
            }
            let segment_before = self.filter.segment(&self.leaves[&id].state);
            if branches.len() == 1 {
                let (state, lp) = branches.into_iter().next().expect("one branch");
                let inc = self.ln_p_s + lp;
                let moved = self.filter.segment(&state) != segment_before;
                if inc == T::zero() && !moved {
                    self.leaves.get_mut(&id).expect("leaf").state = state;
                } else {
                    let child = self.child_leaf(id, state, inc, Event::Predict, time);
                    replace.insert(id, vec![child]);
                }
                continue;
            }
            let children = branches
                .into_iter()
                .map(|(state, lp)| self.child_leaf(id, state, self.ln_p_s + lp, Event::Predict, time))
                .collect();
            replace.insert(id, children);
        }
        self.apply_replacements(&replace);
        self.prune_all();
        self.split_clusters();
    }

    /// Splits leaves near junctions according to the split policy, at most
    /// once per leaf and time step.
    fn split_stage(&mut self, scan: &Scan<T>, time: u32) {
        let ids: Vec<LeafId> = self.leaves.keys().copied().collect();
        let mut replace: HashMap<LeafId, Vec<LeafId>> = HashMap::new();
        for id in ids {
            let leaf = &self.leaves[&id];
            if leaf.split_time == Some(time) {
                continue;
            }
            let parts = self.filter.split(&leaf.state);
            if parts.len() <= 1 {
                continue;
            }
            let needed = match self.params.split_policy {
                SplitPolicy::AlwaysSplit => true,
                SplitPolicy::WhenNeeded => scan.observations.iter().any(|o| {
                    parts[1..]
                        .iter()
                        .any(|(s, _)| self.filter.associate(s, o).is_some())
                }),
            };
            if !needed {
                continue;
            }
            let children: Vec<LeafId> = parts
                .into_iter()
                .map(|(state, lp)| {
                    let c = self.child_leaf(id, state, lp, Event::Split, time);
                    self.leaves.get_mut(&c).expect("leaf").split_time = Some(time);
                    c
                })
                .collect();
            replace.insert(id, children);
        }
        if !replace.is_empty() {
            self.apply_replacements(&replace);
        }
    }

    /// Substitutes leaves inside every hypothesis: each listed leaf becomes
    /// one of its replacements (or disappears when the list is empty).
    fn apply_replacements(&mut self, replace: &HashMap<LeafId, Vec<LeafId>>) {
        let cap = self.params.max_hyp_per_cluster;
        let clusters = std::mem::take(&mut self.clusters);
        self.clusters = clusters
            .into_iter()
            .map(|c| {
                let mut out = Vec::new();
                for h in c.hyps {
                    let mut partial: Vec<(Vec<LeafId>, T)> = vec![(Vec::new(), T::zero())];
                    for l in &h.leaves {
                        let options: Vec<LeafId> = match replace.get(l) {
                            Some(r) => r.clone(),
                            None => vec![*l],
                        };
                        if options.is_empty() {
                            continue;
                        }
                        if options.len() == 1 {
                            let s = self.leaves[&options[0]].score;
                            for (leaves, lp) in partial.iter_mut() {
                                leaves.push(options[0]);
                                *lp += s;
                            }
                            continue;
                        }
                        let mut grown = Vec::with_capacity(partial.len() * options.len());
                        for (leaves, lp) in &partial {
                            for &o in &options {
                                let mut v = leaves.clone();
                                v.push(o);
                                grown.push((v, *lp + self.leaves[&o].score));
                            }
                        }
                        grown.sort_by(|a, b| Rank(b.1).cmp(&Rank(a.1)).then_with(|| a.0.cmp(&b.0)));
                        grown.truncate(cap);
                        partial = grown;
                    }
                    for (mut leaves, _) in partial {
                        leaves.sort_unstable();
                        let log_prob = self.sum_scores(&leaves);
                        out.push(Hypothesis { leaves, log_prob });
                    }
                }
                Cluster {
                    hyps: normalize(out, cap),
                }
            })
            .collect();
        for (id, r) in replace {
            if !r.contains(id) {
                self.leaves.remove(id);
            }
        }
        self.collect_garbage();
    }

    fn sum_scores(&self, leaves: &[LeafId]) -> T {
        leaves.iter().map(|l| self.leaves[l].score).sum()
    }

    fn merge_clusters(&self, a: Cluster<T>, b: Cluster<T>) -> Cluster<T> {
        let mut out = Vec::with_capacity(a.hyps.len() * b.hyps.len());
        for x in &a.hyps {
            for y in &b.hyps {
                let mut leaves = x.leaves.clone();
                leaves.extend_from_slice(&y.leaves);
                leaves.sort_unstable();
                out.push(Hypothesis {
                    leaves,
                    log_prob: x.log_prob + y.log_prob,
                });
            }
        }
        Cluster {
            hyps: normalize(out, self.params.max_hyp_per_cluster),
        }
    }

    /// Runs k-best assignment for every parent hypothesis of the cluster and
    /// keeps the best `max_hyp_per_cluster` children overall.
    fn assign_cluster(
        &mut self,
        cluster: Cluster<T>,
        obs: &[usize],
        ctx: &mut ScanContext<F::State, T>,
    ) -> Cluster<T> {
        let cap = self.params.max_hyp_per_cluster;
        // Kept candidates: (log prob, parent index, observation fates as leaves).
        let mut kept: Vec<(T, usize, Vec<Option<LeafId>>, Vec<bool>)> = Vec::new();
        let mut floor: BinaryHeap<std::cmp::Reverse<Rank<T>>> = BinaryHeap::new();
        for (hi, h) in cluster.hyps.iter().enumerate() {
            let cols: Vec<LeafId> = h
                .leaves
                .iter()
                .copied()
                .filter(|l| obs.iter().any(|&j| ctx.gated.contains_key(&(*l, j))))
                .collect();
            let miss_all: T = h.leaves.iter().map(|l| ctx.miss[l]).sum();
            let inc = ScoreIncrements {
                hits: obs
                    .iter()
                    .enumerate()
                    .flat_map(|(r, &j)| {
                        let gated = &ctx.gated;
                        cols.iter().enumerate().filter_map(move |(c, l)| {
                            gated.get(&(*l, j)).map(|(_, v)| (r, c, *v))
                        })
                    })
                    .collect(),
                miss: cols.iter().map(|l| ctx.miss[l]).collect(),
                new_track: obs.iter().map(|_| self.ln_gamma_nt).collect(),
            };
            let (mut cm, _) = assemble_costs(&inc);
            for (r, &j) in obs.iter().enumerate() {
                if ctx.births[j].is_none() {
                    cm.forbid(r, cols.len() + r);
                }
            }
            for a in MurtyIter::new(&cm).take(cap) {
                let lp = h.log_prob + miss_all - a.cost;
                if floor.len() >= cap {
                    let worst = floor.peek().expect("non-empty").0 .0;
                    if lp < worst {
                        break;
                    }
                }
                floor.push(std::cmp::Reverse(Rank(lp)));
                if floor.len() > cap {
                    floor.pop();
                }
                let fates = decode(&cm, &a);
                let mut assigned = vec![None; obs.len()];
                let mut births = vec![false; obs.len()];
                for (r, f) in fates.iter().enumerate() {
                    match f {
                        ObservationFate::Track(c) => assigned[r] = Some(cols[*c]),
                        ObservationFate::NewTrack => births[r] = true,
                        ObservationFate::FalseAlarm => {}
                    }
                }
                kept.push((lp, hi, assigned, births));
            }
        }
        kept.sort_by(|a, b| Rank(b.0).cmp(&Rank(a.0)));
        let cutoff = kept.get(cap.saturating_sub(1)).map(|k| k.0);
        if let Some(c) = cutoff {
            kept.retain(|k| k.0 >= c);
        }

        let mut out = Vec::with_capacity(kept.len());
        for (_, hi, assigned, births) in kept {
            let h = &cluster.hyps[hi];
            let mut leaves = Vec::with_capacity(h.leaves.len() + obs.len());
            for &l in &h.leaves {
                let hit = assigned.iter().position(|a| *a == Some(l));
                let child = match hit {
                    Some(r) => Some(ChildKey::Hit(l, obs[r])),
                    None if ctx.miss[&l] != T::zero() => Some(ChildKey::Miss(l)),
                    None => None,
                };
                leaves.push(match child {
                    Some(key) => self.materialize(key, ctx),
                    None => l,
                });
            }
            for (r, &b) in births.iter().enumerate() {
                if b {
                    leaves.push(self.materialize(ChildKey::Birth(obs[r]), ctx));
                }
            }
            leaves.sort_unstable();
            let log_prob = self.sum_scores(&leaves);
            out.push(Hypothesis { leaves, log_prob });
        }
        Cluster {
            hyps: normalize(out, usize::MAX),
        }
    }

    fn materialize(&mut self, key: ChildKey, ctx: &mut ScanContext<F::State, T>) -> LeafId {
        if let Some(&id) = ctx.memo.get(&key) {
            return id;
        }
        let time = ctx.time;
        let id = match key {
            ChildKey::Hit(parent, j) => {
                let (state, inc) = ctx.gated[&(parent, j)].clone();
                self.child_leaf(parent, state, inc, Event::Hit(ctx.obs_ids[j]), time)
            }
            ChildKey::Miss(parent) => {
                let state = self.leaves[&parent].state.clone();
                self.child_leaf(parent, state, ctx.miss[&parent], Event::Miss, time)
            }
            ChildKey::Birth(j) => {
                let tree = match ctx.birth_trees.get(&j) {
                    Some(&t) => t,
                    None => {
                        let t = self.alloc_tree();
                        ctx.birth_trees.insert(j, t);
                        t
                    }
                };
                let state = ctx.births[j].clone().expect("birth feasible");
                let id = self.alloc_leaf();
                let node = HistoryNode {
                    time,
                    event: Event::Birth(ctx.obs_ids[j]),
                    segment: self.filter.segment(&state),
                    increment: self.ln_gamma_nt,
                    parent: None,
                };
                self.leaves.insert(
                    id,
                    Leaf {
                        id,
                        tree,
                        state,
                        score: self.ln_gamma_nt,
                        hits: 1,
                        history: Arc::new(node),
                        split_time: None,
                    },
                );
                id
            }
        };
        ctx.memo.insert(key, id);
        id
    }

    fn prune_all(&mut self) {
        let clusters = std::mem::take(&mut self.clusters);
        self.clusters = clusters.into_iter().map(|c| self.prune_cluster(c)).collect();
        self.collect_garbage();
    }

    fn prune_cluster(&self, c: Cluster<T>) -> Cluster<T> {
        let p = &self.params;
        let cap = p.max_hyp_per_cluster;
        let term = T::lit(p.termination_score);
        // Terminated tracks leave the hypotheses they were part of.
        let hyps: Vec<Hypothesis<T>> = c
            .hyps
            .into_iter()
            .map(|mut h| {
                h.leaves.retain(|l| self.leaves[l].score >= term);
                h.log_prob = self.sum_scores(&h.leaves);
                h
            })
            .collect();
        let mut hyps = normalize(hyps, usize::MAX);
        let Some(best) = hyps.first().cloned() else {
            return Cluster { hyps };
        };

        // Relative score window per tree.
        let window = T::lit(p.min_rel_score);
        let mut tree_best: HashMap<TreeId, T> = HashMap::new();
        for l in hyps.iter().flat_map(|h| &h.leaves) {
            let leaf = &self.leaves[l];
            let e = tree_best.entry(leaf.tree).or_insert(leaf.score);
            if leaf.score > *e {
                *e = leaf.score;
            }
        }
        hyps.retain(|h| {
            h.leaves.iter().all(|l| {
                let leaf = &self.leaves[l];
                best.leaves.binary_search(l).is_ok() || leaf.score >= tree_best[&leaf.tree] - window
            })
        });
        hyps.truncate(cap);

        // N-scan: agree with the best hypothesis on everything up to k − N.
        if let Some(now) = self.time {
            if p.nscan > 0 && now >= p.nscan {
                let cutoff = now - p.nscan;
                let anchors: Vec<(TreeId, *const HistoryNode<T>)> = best
                    .leaves
                    .iter()
                    .filter_map(|l| {
                        let leaf = &self.leaves[l];
                        ancestor_at(&leaf.history, cutoff).map(|a| (leaf.tree, a as *const _))
                    })
                    .collect();
                if !anchors.is_empty() {
                    hyps.retain(|h| {
                        anchors.iter().all(|(tree, anchor)| {
                            h.leaves.iter().any(|l| {
                                let leaf = &self.leaves[l];
                                leaf.tree == *tree
                                    && ancestor_at(&leaf.history, cutoff)
                                        .is_some_and(|a| std::ptr::eq(a, *anchor))
                            })
                        })
                    });
                }
            }
        }
        Cluster { hyps }
    }

    /// Drops leaves no hypothesis refers to and clusters left without trees.
    fn collect_garbage(&mut self) {
        let used: BTreeSet<LeafId> = self
            .clusters
            .iter()
            .flat_map(|c| c.hyps.iter().flat_map(|h| h.leaves.iter().copied()))
            .collect();
        self.leaves.retain(|id, _| used.contains(id));
        self.clusters
            .retain(|c| c.hyps.iter().any(|h| !h.leaves.is_empty()));
    }

    /// Splits clusters whose trees no longer share any observation.
    fn split_clusters(&mut self) {
        let cap = self.params.max_hyp_per_cluster;
        let clusters = std::mem::take(&mut self.clusters);
        let mut out = Vec::with_capacity(clusters.len());
        for c in clusters {
            let trees: BTreeSet<TreeId> = c
                .hyps
                .iter()
                .flat_map(|h| &h.leaves)
                .map(|l| self.leaves[l].tree)
                .collect();
            if trees.len() <= 1 {
                out.push(c);
                continue;
            }
            let index: BTreeMap<TreeId, usize> =
                trees.iter().enumerate().map(|(i, t)| (*t, i)).collect();
            let mut parent: Vec<usize> = (0..trees.len()).collect();
            fn find(p: &mut [usize], mut x: usize) -> usize {
                while p[x] != x {
                    p[x] = p[p[x]];
                    x = p[x];
                }
                x
            }
            let mut owner: HashMap<ObsId, usize> = HashMap::new();
            let leaf_ids: BTreeSet<LeafId> =
                c.hyps.iter().flat_map(|h| h.leaves.iter().copied()).collect();
            for l in &leaf_ids {
                let leaf = &self.leaves[l];
                let ti = index[&leaf.tree];
                for n in leaf.history.ancestry() {
                    if let Some(o) = n.event.observation() {
                        match owner.get(&o) {
                            Some(&other) => {
                                let (a, b) = (find(&mut parent, ti), find(&mut parent, other));
                                if a != b {
                                    parent[a.max(b)] = a.min(b);
                                }
                            }
                            None => {
                                owner.insert(o, ti);
                            }
                        }
                    }
                }
            }
            let mut groups: BTreeMap<usize, BTreeSet<TreeId>> = BTreeMap::new();
            for (t, &i) in &index {
                let root = find(&mut parent, i);
                groups.entry(root).or_default().insert(*t);
            }
            if groups.len() == 1 {
                out.push(c);
                continue;
            }
            for members in groups.values() {
                let hyps: Vec<Hypothesis<T>> = c
                    .hyps
                    .iter()
                    .map(|h| {
                        let leaves: Vec<LeafId> = h
                            .leaves
                            .iter()
                            .copied()
                            .filter(|l| members.contains(&self.leaves[l].tree))
                            .collect();
                        let log_prob = self.sum_scores(&leaves);
                        Hypothesis { leaves, log_prob }
                    })
                    .collect();
                out.push(Cluster {
                    hyps: normalize(hyps, cap),
                });
            }
        }
        self.clusters = out;
        self.collect_garbage();
    }
}

/// Latest node of the ancestry at or before `time`.
fn ancestor_at<T>(node: &HistoryNode<T>, time: u32) -> Option<&HistoryNode<T>> {
    node.ancestry().find(|n| n.time <= time)
}

/// Removes duplicate leaf sets, orders best first and truncates.
fn normalize<T: Scalar>(mut hyps: Vec<Hypothesis<T>>, cap: usize) -> Vec<Hypothesis<T>> {
    hyps.sort_by(|a, b| a.leaves.cmp(&b.leaves));
    hyps.dedup_by(|a, b| a.leaves == b.leaves);
    hyps.sort_by(hyp_order);
    hyps.truncate(cap);
    hyps
}
