//! Free-space baseline filter: a planar constant velocity model that knows
//! nothing about the road network. Road-bound observations are mapped to
//! world positions before use.

use std::sync::Arc;

use crate::association::{Gate, DEFAULT_GAMMA_G};
use crate::linalg::{Mat2, Matrix, Vec2, Vector};
use crate::mht::TrackFilter;
use crate::ncfilter::gaussian_log_pdf;
use crate::network::{NetworkError, RoadNetwork};
use crate::scalar::Scalar;
use crate::statespace::{ModelError, Observation, Scan};

pub type Vec4<T> = Vector<T, 4>;
pub type Mat4<T> = Matrix<T, 4, 4>;

/// Default initial velocity variance per axis, (m/s)².
pub const DEFAULT_INIT_VELOCITY_VAR: f64 = 2.0;

/// Gaussian over `[x, y, vx, vy]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarEstimate<T> {
    pub mean: Vec4<T>,
    pub covariance: Mat4<T>,
}

/// Constant velocity in both axes, state `[x, y, vx, vy]`.
pub fn make_cv_model_2d<T: Scalar>(dt: T, q: T) -> Result<(Mat4<T>, Mat4<T>), ModelError> {
    let one = crate::statespace::make_cv_model(dt, q)?;
    let f1 = one.transition;
    let q1 = one.process_noise;
    let mut f = Mat4::zeros();
    let mut qm = Mat4::zeros();
    for axis in 0..2 {
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            f[(axis + 2 * i, axis + 2 * j)] = f1[(i, j)];
            qm[(axis + 2 * i, axis + 2 * j)] = q1[(i, j)];
        }
    }
    Ok((f, qm))
}

#[derive(Clone, Debug)]
pub struct FreeSpaceFilter<T> {
    pub net: Arc<RoadNetwork<T>>,
    pub transition: Mat4<T>,
    pub process_noise: Mat4<T>,
    /// Position noise `σ² I`.
    pub noise: Mat2<T>,
    pub gate: Gate<T>,
    pub init_cov: Mat4<T>,
    /// Radius of the disc the baseline assumes each sensor observes.
    pub fov_radius: T,
    /// Tracks leaving this box are dropped.
    pub bounds: ([T; 2], [T; 2]),
}

impl<T: Scalar> FreeSpaceFilter<T> {
    /// Ellipsoidal gate at the 99% χ² quantile; the track volume is the
    /// network bounding box grown by `fov_radius`.
    pub fn new(net: Arc<RoadNetwork<T>>, dt: T, q: T, sigma: T, fov_radius: T) -> Result<Self, ModelError> {
        if !(sigma > T::zero()) {
            return Err(ModelError::NonPositiveSigma(sigma.as_f64()));
        }
        let (transition, process_noise) = make_cv_model_2d(dt, q)?;
        let var = sigma * sigma;
        let v0 = T::lit(DEFAULT_INIT_VELOCITY_VAR);
        let (lo, hi) = net.bounding_box();
        Ok(Self {
            transition,
            process_noise,
            noise: Mat2::diagonal([var, var]),
            gate: Gate::Ellipsoidal {
                gamma_g: T::lit(DEFAULT_GAMMA_G),
            },
            init_cov: Mat4::diagonal([var, var, v0, v0]),
            fov_radius,
            bounds: (
                [lo[0] - fov_radius, lo[1] - fov_radius],
                [hi[0] + fov_radius, hi[1] + fov_radius],
            ),
            net,
        })
    }

    /// World position of an observation.
    pub fn project(&self, obs: &Observation<T>) -> Option<Vec2<T>> {
        let seg = obs.most_likely_segment()?;
        let p = self.net.extrapolate(seg, obs.position).ok()?;
        Some(Vec2::from_array(p))
    }

    fn observation_matrix() -> Matrix<T, 2, 4> {
        let mut h = Matrix::zeros();
        h[(0, 0)] = T::one();
        h[(1, 1)] = T::one();
        h
    }
}

impl<T: Scalar> TrackFilter<T> for FreeSpaceFilter<T> {
    type State = PlanarEstimate<T>;

    fn predict(&self, s: &PlanarEstimate<T>) -> Vec<(PlanarEstimate<T>, T)> {
        let f = self.transition;
        let mean = f * s.mean;
        let covariance = (f * s.covariance * f.transpose() + self.process_noise).symmetrize();
        let (lo, hi) = self.bounds;
        let inside = (0..2).all(|k| mean[k] >= lo[k] && mean[k] <= hi[k]);
        if !inside {
            return Vec::new();
        }
        vec![(PlanarEstimate { mean, covariance }, T::zero())]
    }

    fn associate(&self, s: &PlanarEstimate<T>, obs: &Observation<T>) -> Option<(PlanarEstimate<T>, T)> {
        let z = self.project(obs)?;
        let h = Self::observation_matrix();
        let p = s.covariance;
        let cov = (h * p * h.transpose() + self.noise).symmetrize();
        let innovation = z - h * s.mean;
        if !self.gate.passes(&innovation, &cov) {
            return None;
        }
        let cov_inv = cov.inverse()?;
        let gain = p * h.transpose() * cov_inv;
        let mean = s.mean + gain * innovation;
        let covariance = (p - gain * h * p).symmetrize();
        let ln_lik = gaussian_log_pdf(&innovation, &cov, &cov_inv);
        Some((PlanarEstimate { mean, covariance }, ln_lik))
    }

    fn initiate(&self, obs: &Observation<T>) -> Option<PlanarEstimate<T>> {
        let z = self.project(obs)?;
        Some(PlanarEstimate {
            mean: Vec4::from_array([z[0], z[1], T::zero(), T::zero()]),
            covariance: self.init_cov,
        })
    }

    fn in_footprint(&self, s: &PlanarEstimate<T>, scan: &Scan<T>) -> bool {
        let dx = s.mean[0] - scan.sensor_position[0];
        let dy = s.mean[1] - scan.sensor_position[1];
        (dx * dx + dy * dy).sqrt() <= self.fov_radius
    }

    fn world_position(&self, s: &PlanarEstimate<T>) -> [T; 2] {
        [s.mean[0], s.mean[1]]
    }

    fn moments(&self, s: &PlanarEstimate<T>) -> (Vec<T>, Vec<T>) {
        let c = s.covariance;
        let cov = (0..4).flat_map(|i| (0..4).map(move |j| c[(i, j)])).collect();
        (s.mean.to_array().to_vec(), cov)
    }

    fn check_scan(&self, scan: &Scan<T>) -> Result<(), NetworkError> {
        for o in &scan.observations {
            for &(seg, _) in &o.segment_belief {
                self.net.segment(seg)?;
            }
        }
        Ok(())
    }
}
