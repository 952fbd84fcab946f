//! Kalman filtering conditioned on the discrete segment state.
//!
//! The continuous part is a plain linear Kalman filter. The discrete part only
//! changes during prediction: a mean that runs past the end of its segment is
//! re-expressed on every successor (position minus the finished length) and
//! each branch carries the log transition probability.

use std::sync::Arc;

use thiserror::Error;

use crate::association::{gate, Gate, DEFAULT_KAPPA};
use crate::linalg::{Mat2, Vec2};
use crate::mht::TrackFilter;
use crate::network::{NetworkError, RoadNetwork, SegmentId};
use crate::scalar::{normal_cdf, Scalar};
use crate::statespace::{
    to_world, HybridEstimate, KinematicState, MotionModel, Observation, ObservationModel, Scan,
};

/// Maximum number of segment ends crossed in a single prediction.
pub const MAX_TRANSITION_DEPTH: usize = 5;

/// Default probability mass beyond a segment end that triggers a split.
pub const DEFAULT_LEAK_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("observation carries no segment belief")]
    EmptyBelief,
    #[error("observation has no velocity component but the model measures velocity")]
    MissingVelocity,
    #[error("innovation covariance is singular")]
    SingularInnovation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOutcome<T> {
    /// Predicted estimates with their log transition probabilities.
    pub branches: Vec<(HybridEstimate<T>, T)>,
    /// Every branch left the network through a sink.
    pub exited: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateOutcome<T> {
    pub estimate: HybridEstimate<T>,
    /// `ln N(z; ẑ, S)`.
    pub log_likelihood: T,
    pub innovation: Vec2<T>,
    pub innovation_cov: Mat2<T>,
}

/// Covariance used for a track started from a single observation:
/// `diag(σ², σ²/4 + 1)`.
pub fn default_init_cov<T: Scalar>(om: &ObservationModel<T>) -> Mat2<T> {
    let var = om.sigma * om.sigma;
    Mat2::diagonal([var, var / T::lit(4.0) + T::one()])
}

/// Time update with discrete-state branching.
pub fn predict<T: Scalar>(
    net: &RoadNetwork<T>,
    mm: &MotionModel<T>,
    est: &HybridEstimate<T>,
) -> Result<PredictOutcome<T>, NetworkError> {
    let f = mm.transition;
    let mean = KinematicState::from_vector(f * est.mean.to_vector());
    let cov = (f * est.covariance * f.transpose() + mm.process_noise).symmetrize();

    if mean.position < T::zero() && mean.velocity < T::zero() {
        // Moving backwards off the start of the segment.
        net.segment(est.segment)?;
        return Ok(PredictOutcome {
            branches: Vec::new(),
            exited: true,
        });
    }

    let mut branches = Vec::new();
    walk_transitions(net, est.segment, mean, cov, T::zero(), 0, &mut branches)?;
    let exited = branches.is_empty();
    Ok(PredictOutcome { branches, exited })
}

fn walk_transitions<T: Scalar>(
    net: &RoadNetwork<T>,
    segment: SegmentId,
    mean: KinematicState<T>,
    cov: Mat2<T>,
    log_p: T,
    depth: usize,
    out: &mut Vec<(HybridEstimate<T>, T)>,
) -> Result<(), NetworkError> {
    let len = net.length(segment)?;
    if mean.position <= len || depth >= MAX_TRANSITION_DEPTH {
        out.push((HybridEstimate::new(mean, cov, segment), log_p));
        return Ok(());
    }
    for &(next, p) in net.successors(segment)? {
        if p <= T::zero() {
            continue;
        }
        let shifted = KinematicState::new(mean.position - len, mean.velocity);
        walk_transitions(net, next, shifted, cov, log_p + p.ln(), depth + 1, out)?;
    }
    Ok(())
}

/// Measurement update. The segment never changes here.
pub fn update<T: Scalar>(
    om: &ObservationModel<T>,
    est: &HybridEstimate<T>,
    obs: &Observation<T>,
) -> Result<UpdateOutcome<T>, FilterError> {
    let z = obs.z().ok_or(FilterError::MissingVelocity)?;
    let h = om.observation;
    let p = est.covariance;
    let x = est.mean.to_vector();
    let predicted = h * x;
    let s = (h * p * h.transpose() + om.noise).symmetrize();
    let s_inv = s.inverse().ok_or(FilterError::SingularInnovation)?;
    let gain = p * h.transpose() * s_inv;
    let innovation = z - predicted;
    let mean = KinematicState::from_vector(x + gain * innovation);
    let cov = (p - gain * h * p).symmetrize();
    Ok(UpdateOutcome {
        estimate: HybridEstimate::new(mean, cov, est.segment),
        log_likelihood: gaussian_log_pdf(&innovation, &s, &s_inv),
        innovation,
        innovation_cov: s,
    })
}

/// Joseph-form covariance update `(I − KH) P (I − KH)ᵀ + K R Kᵀ`.
pub fn joseph_covariance<T: Scalar>(om: &ObservationModel<T>, cov: &Mat2<T>) -> Option<Mat2<T>> {
    let h = om.observation;
    let s = h * *cov * h.transpose() + om.noise;
    let gain = *cov * h.transpose() * s.inverse()?;
    let a = Mat2::identity() - gain * h;
    Some(a * *cov * a.transpose() + gain * om.noise * gain.transpose())
}

/// `ln N(ν; 0, S)` for a two-dimensional innovation.
pub fn gaussian_log_pdf<T: Scalar>(innovation: &Vec2<T>, s: &Mat2<T>, s_inv: &Mat2<T>) -> T {
    let two_pi = T::lit(2.0) * T::PI();
    -two_pi.ln() - T::lit(0.5) * s.determinant().ln() - T::lit(0.5) * s_inv.quad_form(innovation)
}

/// Gaussian probability mass of the along-segment position beyond the end of
/// the estimate's segment.
pub fn leak_mass<T: Scalar>(net: &RoadNetwork<T>, est: &HybridEstimate<T>) -> Result<T, NetworkError> {
    let len = net.length(est.segment)?;
    let sd = est.position_std();
    let mu = est.mean.position;
    if sd <= T::zero() {
        return Ok(if mu > len { T::one() } else { T::zero() });
    }
    Ok(normal_cdf((mu - len) / sd))
}

/// Splits an estimate close to a junction into the original plus one copy per
/// successor, re-expressed on that successor as if the transition had already
/// happened. Returns only the original (log-probability 0) when the mass past
/// the end does not exceed `leak_threshold` or the segment is a sink.
pub fn split_near_junction<T: Scalar>(
    net: &RoadNetwork<T>,
    est: &HybridEstimate<T>,
    leak_threshold: T,
) -> Result<Vec<(HybridEstimate<T>, T)>, NetworkError> {
    let mass = leak_mass(net, est)?;
    let successors = net.successors(est.segment)?;
    if mass <= leak_threshold || successors.is_empty() || mass >= T::one() {
        return Ok(vec![(*est, T::zero())]);
    }
    let len = net.length(est.segment)?;
    let mut out = Vec::with_capacity(successors.len() + 1);
    out.push((*est, (T::one() - mass).ln()));
    for &(next, p) in successors {
        if p <= T::zero() {
            continue;
        }
        let mut moved = *est;
        moved.segment = next;
        moved.mean.position = est.mean.position - len;
        out.push((moved, (mass * p).ln()));
    }
    Ok(out)
}

/// Starts a track from a single observation. The mean is the measurement
/// itself (`H = I`); a missing velocity falls back to `defaults.velocity`.
pub fn init_track<T: Scalar>(
    net: &RoadNetwork<T>,
    obs: &Observation<T>,
    defaults: KinematicState<T>,
    init_cov: Mat2<T>,
) -> Result<HybridEstimate<T>, FilterError> {
    let segment = obs.most_likely_segment().ok_or(FilterError::EmptyBelief)?;
    net.segment(segment)?;
    let mean = KinematicState::new(obs.position, obs.velocity.unwrap_or(defaults.velocity));
    Ok(HybridEstimate::new(mean, init_cov, segment))
}

/// Road-bound track filter for the tracker: conditional Kalman filtering,
/// two-stage gating and junction splitting.
#[derive(Clone, Debug)]
pub struct NetworkFilter<T> {
    pub net: Arc<RoadNetwork<T>>,
    pub motion: MotionModel<T>,
    pub observation: ObservationModel<T>,
    pub gate: Gate<T>,
    pub leak_threshold: T,
    pub init_cov: Mat2<T>,
    pub defaults: KinematicState<T>,
}

impl<T: Scalar> NetworkFilter<T> {
    /// Scalar gate with κ = 3, 1% leak threshold, default initial covariance
    /// and zero default velocity.
    pub fn new(net: Arc<RoadNetwork<T>>, motion: MotionModel<T>, observation: ObservationModel<T>) -> Self {
        Self {
            net,
            motion,
            gate: Gate::Scalar {
                kappa: T::lit(DEFAULT_KAPPA),
            },
            leak_threshold: T::lit(DEFAULT_LEAK_THRESHOLD),
            init_cov: default_init_cov(&observation),
            observation,
            defaults: KinematicState::default(),
        }
    }
}

impl<T: Scalar> TrackFilter<T> for NetworkFilter<T> {
    type State = HybridEstimate<T>;

    fn predict(&self, s: &HybridEstimate<T>) -> Vec<(HybridEstimate<T>, T)> {
        predict(&self.net, &self.motion, s)
            .map(|o| o.branches)
            .unwrap_or_default()
    }

    fn split(&self, s: &HybridEstimate<T>) -> Vec<(HybridEstimate<T>, T)> {
        split_near_junction(&self.net, s, self.leak_threshold).unwrap_or_else(|_| vec![(*s, T::zero())])
    }

    fn associate(&self, s: &HybridEstimate<T>, obs: &Observation<T>) -> Option<(HybridEstimate<T>, T)> {
        let h = self.observation.observation;
        let z_hat = h * s.mean.to_vector();
        let cov = h * s.covariance * h.transpose() + self.observation.noise;
        if !gate(&self.gate, (&z_hat, &cov), s.segment, obs, false, &self.net) {
            return None;
        }
        let out = update(&self.observation, s, obs).ok()?;
        Some((out.estimate, out.log_likelihood + obs.belief(s.segment).ln()))
    }

    fn initiate(&self, obs: &Observation<T>) -> Option<HybridEstimate<T>> {
        init_track(&self.net, obs, self.defaults, self.init_cov).ok()
    }

    fn in_footprint(&self, s: &HybridEstimate<T>, scan: &Scan<T>) -> bool {
        let Ok(len) = self.net.length(s.segment) else {
            return false;
        };
        let along = s.mean.position.max(T::zero()).min(len);
        scan.footprint_contains(s.segment, along)
    }

    fn world_position(&self, s: &HybridEstimate<T>) -> [T; 2] {
        to_world(&self.net, s).unwrap_or([T::nan(); 2])
    }

    fn segment(&self, s: &HybridEstimate<T>) -> Option<SegmentId> {
        Some(s.segment)
    }

    fn moments(&self, s: &HybridEstimate<T>) -> (Vec<T>, Vec<T>) {
        let c = s.covariance;
        (
            vec![s.mean.position, s.mean.velocity],
            vec![c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]],
        )
    }

    fn check_scan(&self, scan: &Scan<T>) -> Result<(), NetworkError> {
        for f in &scan.footprint {
            self.net.segment(f.segment)?;
        }
        for o in &scan.observations {
            for &(seg, _) in &o.segment_belief {
                self.net.segment(seg)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Segment;
    use crate::statespace::{make_cv_model, make_obs_model};

    fn fork(l0: f64) -> RoadNetwork<f64> {
        RoadNetwork::new(
            vec![
                Segment::new([0.0, 0.0], [l0, 0.0]),
                Segment::new([l0, 0.0], [l0 + 30.0, 30.0]),
                Segment::new([l0, 0.0], [l0 + 30.0, -30.0]),
            ],
            vec![vec![(SegmentId(1), 0.5), (SegmentId(2), 0.5)], vec![], vec![]],
        )
        .unwrap()
    }

    fn est(pos: f64, vel: f64, cov: Mat2<f64>, seg: usize) -> HybridEstimate<f64> {
        HybridEstimate::new(KinematicState::new(pos, vel), cov, SegmentId(seg))
    }

    #[test]
    fn predict_branches_at_fork() {
        let net = fork(10.0);
        let mm = make_cv_model(1.0, 0.1).unwrap();
        let out = predict(&net, &mm, &est(9.0, 1.5, Mat2::diagonal([0.1, 0.01]), 0)).unwrap();
        assert!(!out.exited);
        assert_eq!(out.branches.len(), 2);
        // Hand propagation of F P Fᵀ + Q.
        let expected = Mat2::from_rows([
            [0.1 + 0.01 + 0.01 / 3.0, 0.01 + 0.005],
            [0.01 + 0.005, 0.01 + 0.01],
        ]);
        for (i, (b, lp)) in out.branches.iter().enumerate() {
            assert_eq!(b.segment, SegmentId(i + 1));
            assert!((b.mean.position - 0.5).abs() < 1e-12);
            assert_eq!(b.mean.velocity, 1.5);
            assert!((lp - 0.5_f64.ln()).abs() < 1e-15);
            assert!(b.covariance.max_abs_diff(&expected) < 1e-12);
        }
        assert!((expected[(0, 0)] - 0.113_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn predict_without_transition() {
        let net = fork(10.0);
        let mm = make_cv_model(1.0, 0.1).unwrap();
        let out = predict(&net, &mm, &est(2.0, 1.0, Mat2::identity(), 0)).unwrap();
        assert_eq!(out.branches.len(), 1);
        let (b, lp) = out.branches[0];
        assert_eq!(b.segment, SegmentId(0));
        assert_eq!(b.mean, KinematicState::new(3.0, 1.0));
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn predict_exits_through_sink() {
        let net = fork(10.0);
        let mm = make_cv_model(1.0, 0.1).unwrap();
        let b = net.length(SegmentId(1)).unwrap();
        let out = predict(&net, &mm, &est(b - 0.5, 1.0, Mat2::identity(), 1)).unwrap();
        assert!(out.exited);
        assert!(out.branches.is_empty());

        let back = predict(&net, &mm, &est(0.2, -1.0, Mat2::identity(), 0)).unwrap();
        assert!(back.exited);
    }

    #[test]
    fn predict_recurses_through_short_segments() {
        let net = RoadNetwork::new(
            vec![
                Segment::new([0.0, 0.0], [1.0, 0.0]),
                Segment::new([1.0, 0.0], [2.0, 0.0]),
                Segment::new([2.0, 0.0], [12.0, 0.0]),
            ],
            vec![vec![(SegmentId(1), 1.0)], vec![(SegmentId(2), 1.0)], vec![]],
        )
        .unwrap();
        let mm = make_cv_model(1.0, 0.1).unwrap();
        let out = predict(&net, &mm, &est(0.5, 3.0, Mat2::identity(), 0)).unwrap();
        assert_eq!(out.branches.len(), 1);
        assert_eq!(out.branches[0].0.segment, SegmentId(2));
        assert!((out.branches[0].0.mean.position - 1.5).abs() < 1e-12);
    }

    #[test]
    fn update_gain_matches_hand_computation() {
        let om = make_obs_model(0.5).unwrap();
        let e = est(0.0, 0.0, Mat2::identity(), 0);
        let obs = Observation::on_segment(SegmentId(0), 1.0, 1.0);
        let out = update(&om, &e, &obs).unwrap();
        // K = P (P + R)⁻¹ = diag(1/1.25, 1/1.0625).
        let k = [0.8, 1.0 / 1.0625];
        assert!((out.estimate.mean.position - k[0]).abs() < 1e-12);
        assert!((out.estimate.mean.velocity - k[1]).abs() < 1e-12);
        assert!((k[1] - 0.941_176_470_588).abs() < 1e-9);
        let p = Mat2::diagonal([0.2, 1.0 - k[1]]);
        assert!(out.estimate.covariance.max_abs_diff(&p) < 1e-12);
        assert!((p[(1, 1)] - 0.058_823_529_4).abs() < 1e-9);
        assert_eq!(out.estimate.segment, SegmentId(0));
    }

    #[test]
    fn zero_innovation_log_likelihood() {
        let om = make_obs_model(0.5).unwrap();
        let e = est(4.0, 1.2, Mat2::diagonal([0.3, 0.1]), 0);
        let obs = Observation::on_segment(SegmentId(0), 4.0, 1.2);
        let out = update(&om, &e, &obs).unwrap();
        assert_eq!(out.estimate.mean, e.mean);
        let det = out.innovation_cov.determinant();
        let expected = -(2.0 * std::f64::consts::PI * det.sqrt()).ln();
        assert!((out.log_likelihood - expected).abs() < 1e-12);
    }

    #[test]
    fn confident_prior_ignores_measurement() {
        let om = make_obs_model(0.5).unwrap();
        let e = est(4.0, 1.2, Mat2::zeros(), 0);
        let obs = Observation::on_segment(SegmentId(0), 40.0, -3.0);
        let out = update(&om, &e, &obs).unwrap();
        assert_eq!(out.estimate.mean, e.mean);
        assert_eq!(out.estimate.covariance, Mat2::zeros());
    }

    #[test]
    fn update_requires_velocity() {
        let om = make_obs_model(0.5).unwrap();
        let obs = Observation {
            position: 1.0,
            velocity: None,
            segment_belief: vec![(SegmentId(0), 1.0)],
        };
        assert_eq!(
            update(&om, &est(0.0, 0.0, Mat2::identity(), 0), &obs),
            Err(FilterError::MissingVelocity)
        );
    }

    #[test]
    fn split_single_successor() {
        let net = RoadNetwork::new(
            vec![
                Segment::new([0.0, 0.0], [10.0, 0.0]),
                Segment::new([10.0, 0.0], [20.0, 0.0]),
            ],
            vec![vec![(SegmentId(1), 1.0)], vec![]],
        )
        .unwrap();
        let e = est(9.9, 1.0, Mat2::diagonal([0.05 * 0.05, 0.1]), 0);
        let parts = split_near_junction(&net, &e, 0.01).unwrap();
        assert_eq!(parts.len(), 2);
        let probs: Vec<f64> = parts.iter().map(|(_, lp)| lp.exp()).collect();
        assert!((probs[1] - 0.022_750_131_948).abs() < 1e-9);
        assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);
        assert_eq!(parts[1].0.segment, SegmentId(1));
        assert!((parts[1].0.mean.position + 0.1).abs() < 1e-12);
        assert_eq!(parts[0].0, e);
    }

    #[test]
    fn no_split_far_from_junction() {
        let net = fork(10.0);
        let e = est(5.0, 1.0, Mat2::diagonal([0.01, 0.1]), 0);
        let parts = split_near_junction(&net, &e, 0.01).unwrap();
        assert_eq!(parts, vec![(e, 0.0)]);
    }

    #[test]
    fn split_two_successors_shares_tail_mass() {
        let net = fork(10.0);
        // Choose sd so that the tail mass is 0.02: z = Φ⁻¹(0.02) ≈ -2.053749.
        let sd = 0.1 / 2.053_748_910_631_823;
        let e = est(9.9, 1.0, Mat2::diagonal([sd * sd, 0.1]), 0);
        let parts = split_near_junction(&net, &e, 0.01).unwrap();
        let probs: Vec<f64> = parts.iter().map(|(_, lp)| lp.exp()).collect();
        assert!((probs[0] - 0.98).abs() < 1e-6);
        assert!((probs[1] - 0.01).abs() < 1e-6);
        assert!((probs[2] - 0.01).abs() < 1e-6);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn init_from_observation() {
        let net = RoadNetwork::new(
            (0..8)
                .map(|i| Segment::new([0.0, i as f64], [10.0, i as f64]))
                .collect(),
            vec![vec![]; 8],
        )
        .unwrap();
        let om = make_obs_model(0.5).unwrap();
        let cov = default_init_cov(&om);
        assert_eq!(cov, Mat2::diagonal([0.25, 1.0625]));
        let obs = Observation::on_segment(SegmentId(7), 4.2, 1.3);
        let e = init_track(&net, &obs, KinematicState::default(), cov).unwrap();
        assert_eq!(e.mean, KinematicState::new(4.2, 1.3));
        assert_eq!(e.segment, SegmentId(7));

        let pos_only = Observation {
            position: 4.2,
            velocity: None,
            segment_belief: vec![(SegmentId(7), 1.0)],
        };
        let e = init_track(&net, &pos_only, KinematicState::default(), cov).unwrap();
        assert_eq!(e.mean, KinematicState::new(4.2, 0.0));

        let empty = Observation {
            position: 4.2,
            velocity: Some(1.0),
            segment_belief: vec![],
        };
        assert_eq!(
            init_track(&net, &empty, KinematicState::default(), cov),
            Err(FilterError::EmptyBelief)
        );
    }
}
