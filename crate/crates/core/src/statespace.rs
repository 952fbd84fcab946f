//! Hybrid target state, the along-segment constant velocity model and the
//! linear observation model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Mat2, Vec2};
use crate::network::{NetworkError, RoadNetwork, SegmentId};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sampling time must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("process noise intensity must be positive, got {0}")]
    NonPositiveNoise(f64),
    #[error("measurement standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
}

/// Position along the current segment (m) and signed speed (m/s, positive
/// toward the segment end).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct KinematicState<T> {
    pub position: T,
    pub velocity: T,
}

impl<T: Scalar> KinematicState<T> {
    pub fn new(position: T, velocity: T) -> Self {
        Self { position, velocity }
    }

    pub fn to_vector(self) -> Vec2<T> {
        Vec2::from_array([self.position, self.velocity])
    }

    pub fn from_vector(v: Vec2<T>) -> Self {
        let [position, velocity] = v.to_array();
        Self { position, velocity }
    }
}

/// Gaussian over the along-segment kinematics, conditioned on one segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridEstimate<T> {
    pub mean: KinematicState<T>,
    pub covariance: Mat2<T>,
    pub segment: SegmentId,
}

impl<T: Scalar> HybridEstimate<T> {
    pub fn new(mean: KinematicState<T>, covariance: Mat2<T>, segment: SegmentId) -> Self {
        Self {
            mean,
            covariance,
            segment,
        }
    }

    pub fn position_std(&self) -> T {
        self.covariance[(0, 0)].max(T::zero()).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionModel<T> {
    pub transition: Mat2<T>,
    pub process_noise: Mat2<T>,
    pub dt: T,
    pub q: T,
}

/// Constant velocity model `F = [[1, dt], [0, 1]]`,
/// `Q = q² [[dt³/3, dt²/2], [dt²/2, dt]]`.
pub fn make_cv_model<T: Scalar>(dt: T, q: T) -> Result<MotionModel<T>, ModelError> {
    if !(dt > T::zero()) {
        return Err(ModelError::NonPositiveDt(dt.as_f64()));
    }
    if !(q > T::zero()) {
        return Err(ModelError::NonPositiveNoise(q.as_f64()));
    }
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let unit = Mat2::from_rows([
        [dt * dt * dt / three, dt * dt / two],
        [dt * dt / two, dt],
    ]);
    Ok(MotionModel {
        transition: Mat2::from_rows([[T::one(), dt], [T::zero(), T::one()]]),
        process_noise: unit.scale(q * q),
        dt,
        q,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservationModel<T> {
    pub observation: Mat2<T>,
    pub noise: Mat2<T>,
    pub sigma: T,
}

/// Position and speed measured directly: `H = I`, `R = diag(σ², σ²/4)`.
pub fn make_obs_model<T: Scalar>(sigma: T) -> Result<ObservationModel<T>, ModelError> {
    if !(sigma > T::zero()) {
        return Err(ModelError::NonPositiveSigma(sigma.as_f64()));
    }
    let var = sigma * sigma;
    Ok(ObservationModel {
        observation: Mat2::identity(),
        noise: Mat2::diagonal([var, var / T::lit(4.0)]),
        sigma,
    })
}

/// One road-bound measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<T> {
    pub position: T,
    /// `None` for sensors that only report position.
    pub velocity: Option<T>,
    /// Probability that the target is on each listed segment.
    pub segment_belief: Vec<(SegmentId, T)>,
}

impl<T: Scalar> Observation<T> {
    /// Observation with exact discrete state information.
    pub fn on_segment(segment: SegmentId, position: T, velocity: T) -> Self {
        Self {
            position,
            velocity: Some(velocity),
            segment_belief: vec![(segment, T::one())],
        }
    }

    pub fn belief(&self, segment: SegmentId) -> T {
        self.segment_belief
            .iter()
            .find(|(s, _)| *s == segment)
            .map_or(T::zero(), |&(_, p)| p)
    }

    /// Segment with the largest belief; ties resolve to the lowest id.
    pub fn most_likely_segment(&self) -> Option<SegmentId> {
        let mut best: Option<(SegmentId, T)> = None;
        for &(s, p) in &self.segment_belief {
            match best {
                Some((bs, bp)) if p < bp || (p == bp && s > bs) => {}
                _ => best = Some((s, p)),
            }
        }
        best.map(|(s, _)| s)
    }

    pub fn z(&self) -> Option<Vec2<T>> {
        self.velocity
            .map(|v| Vec2::from_array([self.position, v]))
    }
}

/// Along-road interval `[lo, hi]` on one segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintInterval<T> {
    pub segment: SegmentId,
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> FootprintInterval<T> {
    pub fn length(&self) -> T {
        self.hi - self.lo
    }

    pub fn contains(&self, segment: SegmentId, along: T) -> bool {
        segment == self.segment && along >= self.lo && along <= self.hi
    }
}

/// Observations from one sensor at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan<T> {
    pub time: u32,
    pub sensor: usize,
    /// Sensor pose on the network and in the world.
    pub sensor_segment: SegmentId,
    pub sensor_along: T,
    pub sensor_position: [T; 2],
    pub footprint: Vec<FootprintInterval<T>>,
    pub observations: Vec<Observation<T>>,
    pub is_reported: bool,
}

impl<T: Scalar> Scan<T> {
    pub fn footprint_contains(&self, segment: SegmentId, along: T) -> bool {
        self.footprint.iter().any(|i| i.contains(segment, along))
    }

    pub fn footprint_length(&self) -> T {
        self.footprint.iter().map(FootprintInterval::length).sum()
    }
}

/// World point of an estimate. The along-segment position is clamped into
/// `[0, L]` first; this only affects reporting.
pub fn to_world<T: Scalar>(
    net: &RoadNetwork<T>,
    est: &HybridEstimate<T>,
) -> Result<[T; 2], NetworkError> {
    let len = net.length(est.segment)?;
    let along = est.mean.position.max(T::zero()).min(len);
    net.embed(est.segment, along)
}
