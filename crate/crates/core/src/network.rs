//! Road network: directed segments, transition probabilities and the straight
//! line embedding used for world coordinates.
//!
//! Segments are vertices of the graph. A target reaching the end of segment
//! `s` continues on one of `successors(s)` with the listed probability; a
//! segment without successors is a sink where targets leave the network.
//!
//! Network documents are TOML:
//!
//! ```toml
//! schema_version = 1
//!
//! [[segments]]
//! id = 0
//! start = [0.0, 0.0]
//! end = [60.0, 0.0]
//!
//! [[transitions]]
//! from = 0
//! to = 1
//! p = 0.5      # optional; omit on every edge of a row for a uniform split
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;

const PROBABILITY_TOLERANCE: f64 = 1e-9;
const CONTINUITY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub usize);

impl SegmentId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("segment {0} does not exist")]
    UnknownSegment(SegmentId),
    #[error("position {along} outside [0, {length}] on segment {segment}")]
    OutOfRange {
        segment: SegmentId,
        along: f64,
        length: f64,
    },
    #[error("segment {0} has zero or non-finite length")]
    DegenerateSegment(SegmentId),
    #[error("segment {segment}: outgoing probabilities sum to {sum}, expected 1")]
    BadProbabilitySum { segment: SegmentId, sum: f64 },
    #[error("segment {segment}: probability {p} to {to} outside [0, 1]")]
    BadProbability {
        segment: SegmentId,
        to: SegmentId,
        p: f64,
    },
    #[error("segment {segment}: transition row mixes explicit and omitted probabilities")]
    MixedRow { segment: SegmentId },
    #[error("segment {segment}: duplicate transition to {to}")]
    DuplicateTransition { segment: SegmentId, to: SegmentId },
    #[error("transition {from} -> {to} references a missing segment")]
    DanglingTransition { from: usize, to: usize },
    #[error("segment {successor} starts {gap} m away from the end of predecessor {segment}")]
    Discontinuous {
        segment: SegmentId,
        successor: SegmentId,
        gap: f64,
    },
    #[error("segment ids must be exactly 0..{count}; problem with id {id}")]
    BadIds { id: usize, count: usize },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("malformed network document: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment<T> {
    pub start: [T; 2],
    pub end: [T; 2],
    length: T,
}

impl<T: Scalar> Segment<T> {
    pub fn new(start: [T; 2], end: [T; 2]) -> Self {
        let length = (end[0] - start[0]).hypot(end[1] - start[1]);
        Self { start, end, length }
    }

    pub fn length(&self) -> T {
        self.length
    }

    /// Unit vector pointing from start to end.
    pub fn direction(&self) -> [T; 2] {
        [
            (self.end[0] - self.start[0]) / self.length,
            (self.end[1] - self.start[1]) / self.length,
        ]
    }

    fn point_at(&self, along: T) -> [T; 2] {
        let f = along / self.length;
        [
            self.start[0] + (self.end[0] - self.start[0]) * f,
            self.start[1] + (self.end[1] - self.start[1]) * f,
        ]
    }
}

/// Immutable road network.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork<T> {
    segments: Vec<Segment<T>>,
    successors: Vec<Vec<(SegmentId, T)>>,
    predecessors: Vec<Vec<SegmentId>>,
}

impl<T: Scalar> RoadNetwork<T> {
    /// Builds and validates a network. Every row in `transitions` must either
    /// be empty (sink) or sum to one.
    pub fn new(
        segments: Vec<Segment<T>>,
        transitions: Vec<Vec<(SegmentId, T)>>,
    ) -> Result<Self, NetworkError> {
        let n = segments.len();
        if transitions.len() != n {
            return Err(NetworkError::BadIds {
                id: transitions.len(),
                count: n,
            });
        }
        for (i, seg) in segments.iter().enumerate() {
            let len = seg.length();
            if !(len > T::zero()) || !len.is_finite() {
                return Err(NetworkError::DegenerateSegment(SegmentId(i)));
            }
        }
        let mut predecessors = vec![Vec::new(); n];
        for (i, row) in transitions.iter().enumerate() {
            let from = SegmentId(i);
            let mut sum = T::zero();
            for (k, &(to, p)) in row.iter().enumerate() {
                if to.0 >= n {
                    return Err(NetworkError::DanglingTransition { from: i, to: to.0 });
                }
                if row[..k].iter().any(|(t, _)| *t == to) {
                    return Err(NetworkError::DuplicateTransition { segment: from, to });
                }
                if !(p >= T::zero() && p <= T::one()) {
                    return Err(NetworkError::BadProbability {
                        segment: from,
                        to,
                        p: p.as_f64(),
                    });
                }
                sum += p;
                let a = segments[i].end;
                let b = segments[to.0].start;
                let gap = (a[0] - b[0]).hypot(a[1] - b[1]).as_f64();
                if gap > CONTINUITY_TOLERANCE {
                    return Err(NetworkError::Discontinuous {
                        segment: from,
                        successor: to,
                        gap,
                    });
                }
                predecessors[to.0].push(from);
            }
            if !row.is_empty() && (sum.as_f64() - 1.0).abs() > PROBABILITY_TOLERANCE {
                return Err(NetworkError::BadProbabilitySum {
                    segment: from,
                    sum: sum.as_f64(),
                });
            }
        }
        Ok(Self {
            segments,
            successors: transitions,
            predecessors,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = SegmentId> {
        (0..self.segments.len()).map(SegmentId)
    }

    pub fn contains(&self, s: SegmentId) -> bool {
        s.0 < self.segments.len()
    }

    pub fn segment(&self, s: SegmentId) -> Result<&Segment<T>, NetworkError> {
        self.segments.get(s.0).ok_or(NetworkError::UnknownSegment(s))
    }

    pub fn length(&self, s: SegmentId) -> Result<T, NetworkError> {
        Ok(self.segment(s)?.length())
    }

    pub fn total_length(&self) -> T {
        self.segments.iter().map(Segment::length).sum()
    }

    /// Outgoing transitions of `s`; empty for a sink.
    pub fn successors(&self, s: SegmentId) -> Result<&[(SegmentId, T)], NetworkError> {
        self.successors
            .get(s.0)
            .map(Vec::as_slice)
            .ok_or(NetworkError::UnknownSegment(s))
    }

    pub fn predecessors(&self, s: SegmentId) -> Result<&[SegmentId], NetworkError> {
        self.predecessors
            .get(s.0)
            .map(Vec::as_slice)
            .ok_or(NetworkError::UnknownSegment(s))
    }

    pub fn transition_probability(&self, from: SegmentId, to: SegmentId) -> Result<T, NetworkError> {
        Ok(self
            .successors(from)?
            .iter()
            .find(|(t, _)| *t == to)
            .map_or(T::zero(), |&(_, p)| p))
    }

    /// World point at `along` meters from the start of `s`.
    pub fn embed(&self, s: SegmentId, along: T) -> Result<[T; 2], NetworkError> {
        let seg = self.segment(s)?;
        if !(along >= T::zero() && along <= seg.length()) {
            return Err(NetworkError::OutOfRange {
                segment: s,
                along: along.as_f64(),
                length: seg.length().as_f64(),
            });
        }
        Ok(seg.point_at(along))
    }

    /// Like [`embed`](Self::embed) but continues the straight line beyond both
    /// ends instead of failing.
    pub fn extrapolate(&self, s: SegmentId, along: T) -> Result<[T; 2], NetworkError> {
        Ok(self.segment(s)?.point_at(along))
    }

    /// Axis-aligned bounding box `(min, max)` of all segment endpoints.
    pub fn bounding_box(&self) -> ([T; 2], [T; 2]) {
        let mut lo = [T::infinity(); 2];
        let mut hi = [T::neg_infinity(); 2];
        for seg in &self.segments {
            for p in [seg.start, seg.end] {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        (lo, hi)
    }

    /// Converts the scalar type, e.g. to run the filters in `f32`.
    pub fn cast<U: Scalar>(&self) -> RoadNetwork<U> {
        let c = |v: T| U::lit(v.as_f64());
        RoadNetwork {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    start: [c(s.start[0]), c(s.start[1])],
                    end: [c(s.end[0]), c(s.end[1])],
                    length: c(s.length),
                })
                .collect(),
            successors: self
                .successors
                .iter()
                .map(|row| row.iter().map(|&(s, p)| (s, c(p))).collect())
                .collect(),
            predecessors: self.predecessors.clone(),
        }
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            schema_version: SCHEMA_VERSION,
            segments: self
                .segments
                .iter()
                .enumerate()
                .map(|(id, s)| SegmentRecord {
                    id,
                    start: [s.start[0].as_f64(), s.start[1].as_f64()],
                    end: [s.end[0].as_f64(), s.end[1].as_f64()],
                })
                .collect(),
            transitions: self
                .successors
                .iter()
                .enumerate()
                .flat_map(|(from, row)| {
                    row.iter().map(move |&(to, p)| TransitionRecord {
                        from,
                        to: to.0,
                        p: Some(p.as_f64()),
                    })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub schema_version: u32,
    pub segments: Vec<SegmentRecord>,
    #[serde(default)]
    pub transitions: Vec<TransitionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub id: usize,
    pub start: [f64; 2],
    pub end: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRecord {
    pub from: usize,
    pub to: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

impl NetworkDocument {
    pub fn build<T: Scalar>(&self) -> Result<RoadNetwork<T>, NetworkError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(NetworkError::SchemaVersion(self.schema_version));
        }
        let count = self.segments.len();
        let mut slots: Vec<Option<Segment<T>>> = vec![None; count];
        for rec in &self.segments {
            if rec.id >= count || slots[rec.id].is_some() {
                return Err(NetworkError::BadIds { id: rec.id, count });
            }
            let p = |v: [f64; 2]| [T::lit(v[0]), T::lit(v[1])];
            slots[rec.id] = Some(Segment::new(p(rec.start), p(rec.end)));
        }
        let segments: Vec<Segment<T>> = slots.into_iter().map(Option::unwrap).collect();

        let mut rows: Vec<Vec<(SegmentId, Option<f64>)>> = vec![Vec::new(); count];
        for t in &self.transitions {
            if t.from >= count || t.to >= count {
                return Err(NetworkError::DanglingTransition {
                    from: t.from,
                    to: t.to,
                });
            }
            rows[t.from].push((SegmentId(t.to), t.p));
        }
        let mut transitions = Vec::with_capacity(count);
        for (i, row) in rows.into_iter().enumerate() {
            let explicit = row.iter().filter(|(_, p)| p.is_some()).count();
            let filled: Vec<(SegmentId, T)> = if explicit == 0 {
                let k = row.len();
                row.into_iter()
                    .map(|(s, _)| (s, T::one() / T::lit(k as f64)))
                    .collect()
            } else if explicit == row.len() {
                row.into_iter()
                    .map(|(s, p)| (s, T::lit(p.unwrap_or_default())))
                    .collect()
            } else {
                return Err(NetworkError::MixedRow {
                    segment: SegmentId(i),
                });
            };
            transitions.push(filled);
        }
        RoadNetwork::new(segments, transitions)
    }
}

/// Parses and validates a TOML network document.
pub fn load_network<T: Scalar>(text: &str) -> Result<RoadNetwork<T>, NetworkError> {
    let doc: NetworkDocument =
        toml::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))?;
    doc.build()
}
