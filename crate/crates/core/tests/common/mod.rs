#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use ncmht::association::{CostMatrix, Gate};
use ncmht::mht::{Event, Tracker, TrackerParams};
use ncmht::ncfilter::NetworkFilter;
use ncmht::network::{RoadNetwork, Segment, SegmentId};
use ncmht::statespace::{make_cv_model, make_obs_model, FootprintInterval, Observation, Scan};

/// All feasible assignments, sorted by (row-order cost, column vector).
pub fn brute_force_assignments(m: &CostMatrix<f64>) -> Vec<(f64, Vec<usize>)> {
    fn rec(m: &CostMatrix<f64>, row: usize, used: &mut Vec<bool>, cols: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if row == m.rows() {
            out.push(cols.clone());
            return;
        }
        for c in 0..m.cols() {
            if used[c] || m.get(row, c).is_none() {
                continue;
            }
            used[c] = true;
            cols.push(c);
            rec(m, row + 1, used, cols, out);
            cols.pop();
            used[c] = false;
        }
    }
    let mut all = Vec::new();
    if m.rows() <= m.cols() {
        rec(m, 0, &mut vec![false; m.cols()], &mut Vec::new(), &mut all);
    }
    let mut scored: Vec<(f64, Vec<usize>)> = all
        .into_iter()
        .map(|cols| {
            let mut acc = 0.0;
            for (r, &c) in cols.iter().enumerate() {
                acc += m.get(r, c).unwrap();
            }
            (acc, cols)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    scored
}

/// GOSPA (α = 2) by enumerating every partial matching.
pub fn brute_force_gospa(x: &[[f64; 2]], y: &[[f64; 2]], c: f64, p: f64) -> (f64, f64, usize) {
    fn rec(
        i: usize,
        x: &[[f64; 2]],
        y: &[[f64; 2]],
        used: &mut Vec<bool>,
        loc: f64,
        matched: usize,
        c: f64,
        p: f64,
        best: &mut (f64, f64, usize),
    ) {
        if i == x.len() {
            let unmatched = (x.len() + y.len() - 2 * matched) as f64;
            let v = loc + c.powf(p) / 2.0 * unmatched;
            if v < best.0 {
                *best = (v, loc, matched);
            }
            return;
        }
        rec(i + 1, x, y, used, loc, matched, c, p, best);
        for j in 0..y.len() {
            if used[j] {
                continue;
            }
            let d = ((x[i][0] - y[j][0]).powi(2) + (x[i][1] - y[j][1]).powi(2)).sqrt();
            if d >= c {
                continue;
            }
            used[j] = true;
            rec(i + 1, x, y, used, loc + d.powf(p), matched + 1, c, p, best);
            used[j] = false;
        }
    }
    let mut best = (f64::INFINITY, 0.0, 0);
    rec(0, x, y, &mut vec![false; y.len()], 0.0, 0, c, p, &mut best);
    (best.0.powf(1.0 / p), best.1, best.2)
}

pub const SIGMA: f64 = 0.5;
pub const Q: f64 = 0.1;

pub fn line(length: f64) -> Arc<RoadNetwork<f64>> {
    Arc::new(RoadNetwork::new(vec![Segment::new([0.0, 0.0], [length, 0.0])], vec![vec![]]).unwrap())
}

/// Parameters that keep every hypothesis alive.
pub fn exhaustive_params() -> TrackerParams {
    TrackerParams {
        max_hyp_per_cluster: 1_000_000,
        min_rel_score: f64::INFINITY,
        nscan: 0,
        termination_score: f64::NEG_INFINITY,
        ..TrackerParams::default()
    }
}

pub fn nc_tracker(net: Arc<RoadNetwork<f64>>, params: TrackerParams, kappa: Option<f64>) -> Tracker<f64, NetworkFilter<f64>> {
    let mut f = NetworkFilter::new(
        net,
        make_cv_model(1.0, Q).unwrap(),
        make_obs_model(SIGMA).unwrap(),
    );
    if let Some(k) = kappa {
        f.gate = Gate::Scalar { kappa: k };
    }
    Tracker::new(f, params).unwrap()
}

pub fn scan_on(seg: usize, time: u32, lo: f64, hi: f64, obs: &[(f64, f64)]) -> Scan<f64> {
    Scan {
        time,
        sensor: 0,
        sensor_segment: SegmentId(seg),
        sensor_along: (lo + hi) / 2.0,
        sensor_position: [(lo + hi) / 2.0, 0.0],
        footprint: vec![FootprintInterval {
            segment: SegmentId(seg),
            lo,
            hi,
        }],
        observations: obs
            .iter()
            .map(|&(p, v)| Observation::on_segment(SegmentId(seg), p, v))
            .collect(),
        is_reported: true,
    }
}

/// Plain 2-state Kalman filter with the shipped model constants.
#[derive(Clone, Copy, Debug)]
pub struct Kf {
    pub x: [f64; 2],
    pub p: [[f64; 2]; 2],
}

impl Kf {
    pub fn start(z: [f64; 2]) -> Self {
        let v = SIGMA * SIGMA;
        Kf {
            x: z,
            p: [[v, 0.0], [0.0, v / 4.0 + 1.0]],
        }
    }

    pub fn predict(&mut self) {
        let [[a, b], [c, d]] = self.p;
        let q2 = Q * Q;
        // F P Fᵀ with F = [[1,1],[0,1]].
        let p00 = a + b + c + d + q2 / 3.0;
        let p01 = b + d + q2 / 2.0;
        let p10 = c + d + q2 / 2.0;
        let p11 = d + q2;
        self.x = [self.x[0] + self.x[1], self.x[1]];
        self.p = [[p00, p01], [p10, p11]];
    }

    /// Updates in place and returns ln N(z; x, P + R).
    pub fn update(&mut self, z: [f64; 2]) -> f64 {
        let r = [SIGMA * SIGMA, SIGMA * SIGMA / 4.0];
        let s = [
            [self.p[0][0] + r[0], self.p[0][1]],
            [self.p[1][0], self.p[1][1] + r[1]],
        ];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let si = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        let nu = [z[0] - self.x[0], z[1] - self.x[1]];
        let m = nu[0] * (si[0][0] * nu[0] + si[0][1] * nu[1]) + nu[1] * (si[1][0] * nu[0] + si[1][1] * nu[1]);
        let k = [
            [
                self.p[0][0] * si[0][0] + self.p[0][1] * si[1][0],
                self.p[0][0] * si[0][1] + self.p[0][1] * si[1][1],
            ],
            [
                self.p[1][0] * si[0][0] + self.p[1][1] * si[1][0],
                self.p[1][0] * si[0][1] + self.p[1][1] * si[1][1],
            ],
        ];
        self.x = [
            self.x[0] + k[0][0] * nu[0] + k[0][1] * nu[1],
            self.x[1] + k[1][0] * nu[0] + k[1][1] * nu[1],
        ];
        let p = self.p;
        self.p = [
            [
                p[0][0] - (k[0][0] * p[0][0] + k[0][1] * p[1][0]),
                p[0][1] - (k[0][0] * p[0][1] + k[0][1] * p[1][1]),
            ],
            [
                p[1][0] - (k[1][0] * p[0][0] + k[1][1] * p[1][0]),
                p[1][1] - (k[1][0] * p[0][1] + k[1][1] * p[1][1]),
            ],
        ];
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * m
    }
}

/// A track's association history as (time, observation index) pairs.
pub type TrackHistory = Vec<(u32, usize)>;

#[derive(Clone, Debug)]
struct OracleTrack {
    kf: Kf,
    score: f64,
    history: TrackHistory,
}

/// Best global hypothesis of a single-segment scenario, found by scoring
/// every association sequence. Each step has one scan whose footprint
/// covers every track. Returns the log probability and the set of track
/// histories.
pub fn oracle_best(scans: &[Vec<(f64, f64)>], params: &TrackerParams) -> (f64, BTreeSet<TrackHistory>) {
    let ln_gamma = params.gamma_nt_value().ln();
    let mut best = (f64::NEG_INFINITY, BTreeSet::new());

    fn assign(
        t: u32,
        obs: &[(f64, f64)],
        j: usize,
        tracks: &mut Vec<OracleTrack>,
        used: &mut Vec<bool>,
        params: &TrackerParams,
        ln_gamma: f64,
        out: &mut Vec<Vec<OracleTrack>>,
    ) {
        if j == obs.len() {
            let mut next = tracks.clone();
            for (i, tr) in next.iter_mut().enumerate() {
                if !used[i] {
                    tr.score += (1.0 - params.p_d).ln();
                }
            }
            out.push(next);
            return;
        }
        let z = [obs[j].0, obs[j].1];
        // False alarm.
        assign(t, obs, j + 1, tracks, used, params, ln_gamma, out);
        // Existing track.
        for i in 0..tracks.len() {
            if used[i] {
                continue;
            }
            let saved = tracks[i].clone();
            let ll = tracks[i].kf.update(z);
            tracks[i].score += (params.p_d * ll.exp() / params.lambda_fa_density).ln();
            tracks[i].history.push((t, j));
            used[i] = true;
            assign(t, obs, j + 1, tracks, used, params, ln_gamma, out);
            used[i] = false;
            tracks[i] = saved;
        }
        // New track; it was not present for the miss bookkeeping.
        let n = tracks.len();
        tracks.push(OracleTrack {
            kf: Kf::start(z),
            score: ln_gamma,
            history: vec![(t, j)],
        });
        used.push(true);
        assign(t, obs, j + 1, tracks, used, params, ln_gamma, out);
        used.pop();
        tracks.truncate(n);
    }

    let mut frontier: Vec<Vec<OracleTrack>> = vec![Vec::new()];
    for (t, obs) in scans.iter().enumerate() {
        let mut next = Vec::new();
        for mut tracks in frontier {
            if t > 0 {
                for tr in &mut tracks {
                    tr.kf.predict();
                }
            }
            let mut used = vec![false; tracks.len()];
            assign(t as u32, obs, 0, &mut tracks, &mut used, params, ln_gamma, &mut next);
        }
        frontier = next;
    }
    for tracks in frontier {
        let lp: f64 = tracks.iter().map(|t| t.score).sum();
        if lp > best.0 {
            best = (lp, tracks.into_iter().map(|t| t.history).collect());
        }
    }
    best
}

/// Best global hypothesis of a tracker in the same form as [`oracle_best`],
/// assuming observation ids were handed out in scan order.
pub fn tracker_best(
    tracker: &Tracker<f64, NetworkFilter<f64>>,
    scans: &[Vec<(f64, f64)>],
) -> (f64, BTreeSet<TrackHistory>) {
    let mut index = Vec::new();
    for (t, obs) in scans.iter().enumerate() {
        for j in 0..obs.len() {
            index.push((t as u32, j));
        }
    }
    let mut lp = 0.0;
    let mut tracks = BTreeSet::new();
    for cluster in tracker.global_hypotheses() {
        let Some((leaves, l)) = cluster.first() else { continue };
        lp += l;
        for id in leaves {
            let leaf = tracker.leaf(*id).unwrap();
            let mut h: TrackHistory = leaf
                .history
                .ancestry()
                .filter_map(|n| match n.event {
                    Event::Birth(o) | Event::Hit(o) => Some(index[o.0 as usize]),
                    _ => None,
                })
                .collect();
            h.reverse();
            tracks.insert(h);
        }
    }
    (lp, tracks)
}
