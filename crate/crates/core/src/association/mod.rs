//! Gating, clustering, assignment-cost construction and k-best assignment.

mod lap;
mod murty;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::linalg::{Mat2, Vec2};
use crate::network::{RoadNetwork, SegmentId};
use crate::scalar::Scalar;
use crate::statespace::Observation;

pub use murty::{murty_kbest, row_order_cost, solve_assignment, Assignment, MurtyIter};

/// Default scalar gate width in standard deviations.
pub const DEFAULT_KAPPA: f64 = 3.0;

/// 99% quantile of the χ² distribution with two degrees of freedom.
pub const DEFAULT_GAMMA_G: f64 = 9.210340371976184;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("gate threshold must be positive and finite, got {0}")]
    BadThreshold(f64),
}

/// Statistical gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate<T> {
    /// `(z − ẑ)ᵀ S⁻¹ (z − ẑ) ≤ γ_G`.
    Ellipsoidal { gamma_g: T },
    /// `|z_pos − ẑ_pos| ≤ κ √S₀₀`.
    Scalar { kappa: T },
}

impl<T: Scalar> Gate<T> {
    pub fn ellipsoidal(gamma_g: T) -> Result<Self, GateError> {
        check_threshold(gamma_g)?;
        Ok(Gate::Ellipsoidal { gamma_g })
    }

    pub fn scalar(kappa: T) -> Result<Self, GateError> {
        check_threshold(kappa)?;
        Ok(Gate::Scalar { kappa })
    }

    /// Statistical test on an innovation with covariance `s`.
    pub fn passes(&self, innovation: &Vec2<T>, s: &Mat2<T>) -> bool {
        match *self {
            Gate::Ellipsoidal { gamma_g } => match s.inverse() {
                Some(s_inv) => s_inv.quad_form(innovation) <= gamma_g,
                None => false,
            },
            Gate::Scalar { kappa } => {
                let sd = s[(0, 0)].max(T::zero()).sqrt();
                innovation[0].abs() <= kappa * sd
            }
        }
    }
}

fn check_threshold<T: Scalar>(v: T) -> Result<(), GateError> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(GateError::BadThreshold(v.as_f64()))
    }
}

/// Two-stage network-constrained gate. The discrete stage requires the
/// observation to give `est_segment` non-zero belief, or with
/// `allow_adjacent` to give it to a direct successor, in which case the observed position is
/// re-expressed on `est_segment` before the statistical stage. A velocity-free
/// observation is gated on position only.
pub fn gate<T: Scalar>(
    g: &Gate<T>,
    predicted: (&Vec2<T>, &Mat2<T>),
    est_segment: SegmentId,
    obs: &Observation<T>,
    allow_adjacent: bool,
    net: &RoadNetwork<T>,
) -> bool {
    let (z_hat, s) = predicted;
    let offset = if obs.belief(est_segment) > T::zero() {
        T::zero()
    } else if allow_adjacent {
        let is_successor = net
            .successors(est_segment)
            .map(|succ| {
                succ.iter()
                    .any(|&(n, p)| p > T::zero() && obs.belief(n) > T::zero())
            })
            .unwrap_or(false);
        if !is_successor {
            return false;
        }
        match net.length(est_segment) {
            Ok(len) => len,
            Err(_) => return false,
        }
    } else {
        return false;
    };
    let position = obs.position + offset;
    match obs.velocity {
        Some(v) => {
            let innovation = Vec2::from_array([position - z_hat[0], v - z_hat[1]]);
            g.passes(&innovation, s)
        }
        None => {
            let innovation = Vec2::from_array([position - z_hat[0], T::zero()]);
            let position_only = Mat2::diagonal([s[(0, 0)], T::one()]);
            match g {
                Gate::Ellipsoidal { gamma_g } => {
                    s[(0, 0)] > T::zero()
                        && innovation[0] * innovation[0] / s[(0, 0)] <= *gamma_g
                }
                Gate::Scalar { .. } => g.passes(&innovation, &position_only),
            }
        }
    }
}

/// Tracks and observations that compete with each other.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cluster {
    pub track_tree_ids: BTreeSet<usize>,
    pub observation_ids: BTreeSet<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClusterPartition {
    /// Ordered by smallest track id, then smallest observation id.
    pub clusters: Vec<Cluster>,
    /// Observations gated by no track.
    pub unclaimed_observations: BTreeSet<usize>,
}

/// Connected components of the bipartite track–observation gating graph.
/// Every listed track ends up in exactly one cluster; observations appear
/// either in the cluster of a track gating them or in the unclaimed pool.
pub fn build_clusters(
    tracks: &[usize],
    observations: &[usize],
    pairs: &[(usize, usize)],
) -> ClusterPartition {
    let mut track_index: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in tracks {
        let n = track_index.len();
        track_index.entry(t).or_insert(n);
    }
    for &(t, _) in pairs {
        let n = track_index.len();
        track_index.entry(t).or_insert(n);
    }
    let mut obs_index: BTreeMap<usize, usize> = BTreeMap::new();
    for &o in observations {
        let n = obs_index.len();
        obs_index.entry(o).or_insert(n);
    }
    for &(_, o) in pairs {
        let n = obs_index.len();
        obs_index.entry(o).or_insert(n);
    }
    let nt = track_index.len();
    let mut uf = UnionFind::new(nt + obs_index.len());
    let mut gated = vec![false; obs_index.len()];
    for &(t, o) in pairs {
        let oi = obs_index[&o];
        gated[oi] = true;
        uf.union(track_index[&t], nt + oi);
    }

    let mut groups: BTreeMap<usize, Cluster> = BTreeMap::new();
    for (&t, &ti) in &track_index {
        groups
            .entry(uf.find(ti))
            .or_default()
            .track_tree_ids
            .insert(t);
    }
    let mut unclaimed = BTreeSet::new();
    for (&o, &oi) in &obs_index {
        if gated[oi] {
            groups
                .entry(uf.find(nt + oi))
                .or_default()
                .observation_ids
                .insert(o);
        } else {
            unclaimed.insert(o);
        }
    }
    let mut clusters: Vec<Cluster> = groups.into_values().collect();
    clusters.sort_by(|a, b| {
        (a.track_tree_ids.first(), a.observation_ids.first())
            .cmp(&(b.track_tree_ids.first(), b.observation_ids.first()))
    });
    ClusterPartition {
        clusters,
        unclaimed_observations: unclaimed,
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Meaning of a cost-matrix column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ColumnKind {
    /// Continue track (leaf) `i` with this row's observation.
    Track(usize),
    /// Start a new track from observation `j`.
    NewTrack(usize),
    /// Declare observation `j` a false alarm.
    FalseAlarm(usize),
    /// Plain column of a matrix built without structure.
    Generic(usize),
}

/// Rectangular cost matrix with explicit infeasible entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Option<T>>,
    kinds: Vec<ColumnKind>,
}

impl<T: Scalar> CostMatrix<T> {
    /// All entries infeasible.
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![None; rows * cols],
            kinds: (0..cols).map(ColumnKind::Generic).collect(),
        }
    }

    pub fn from_dense(rows: Vec<Vec<T>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::new(rows.len(), cols);
        for (r, row) in rows.into_iter().enumerate() {
            assert_eq!(row.len(), cols, "ragged cost matrix");
            for (c, v) in row.into_iter().enumerate() {
                m.set(r, c, v);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Option<T> {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = Some(v);
    }

    pub fn forbid(&mut self, r: usize, c: usize) {
        self.data[r * self.cols + c] = None;
    }

    pub fn kind(&self, c: usize) -> ColumnKind {
        self.kinds[c]
    }

    /// Largest finite magnitude among feasible entries.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .flatten()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }
}

/// Score increments of one association problem: `hits` holds
/// `(observation, track, increment)` for every gated pair, `miss` the
/// increment of each track left unassigned and `new_track` the score of a
/// track started from each observation. A false alarm scores zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreIncrements<T> {
    pub hits: Vec<(usize, usize, T)>,
    pub miss: Vec<T>,
    pub new_track: Vec<T>,
}

/// Fate of one observation in an assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObservationFate {
    Track(usize),
    NewTrack,
    FalseAlarm,
}

/// Cost matrix with one row per observation and columns
/// `[tracks..., new tracks..., false alarms...]`. Entries are negated
/// increments relative to every track being missed, so for any assignment
/// `Σ miss − cost` is the total score increment. Returns the matrix and that
/// baseline `Σ miss`.
pub fn assemble_costs<T: Scalar>(inc: &ScoreIncrements<T>) -> (CostMatrix<T>, T) {
    let m = inc.new_track.len();
    let n = inc.miss.len();
    let mut cm = CostMatrix::new(m, n + 2 * m);
    for i in 0..n {
        cm.kinds[i] = ColumnKind::Track(i);
    }
    for j in 0..m {
        cm.kinds[n + j] = ColumnKind::NewTrack(j);
        cm.kinds[n + m + j] = ColumnKind::FalseAlarm(j);
        cm.set(j, n + j, -inc.new_track[j]);
        cm.set(j, n + m + j, T::zero());
    }
    for &(j, i, v) in &inc.hits {
        cm.set(j, i, -(v - inc.miss[i]));
    }
    let base = inc.miss.iter().copied().sum();
    (cm, base)
}

/// Decodes an assignment of a matrix built by [`assemble_costs`].
pub fn decode(m: &CostMatrix<impl Scalar>, a: &Assignment<impl Scalar>) -> Vec<ObservationFate> {
    a.columns
        .iter()
        .map(|&c| match m.kind(c) {
            ColumnKind::Track(i) => ObservationFate::Track(i),
            ColumnKind::NewTrack(_) => ObservationFate::NewTrack,
            ColumnKind::FalseAlarm(_) | ColumnKind::Generic(_) => ObservationFate::FalseAlarm,
        })
        .collect()
}
