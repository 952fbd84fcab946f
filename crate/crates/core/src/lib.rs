//! Network-constrained multiple hypothesis tracking.

pub mod association;
pub mod experiment;
pub mod freespace;
pub mod linalg;
pub mod metrics;
pub mod mht;
pub mod ncfilter;
pub mod network;
pub mod scalar;
pub mod sim;
pub mod statespace;

pub type Network = network::RoadNetwork<f64>;
pub type NcFilter = ncfilter::NetworkFilter<f64>;
pub type FsFilter = freespace::FreeSpaceFilter<f64>;
pub type NcTracker = mht::Tracker<f64, NcFilter>;
pub type FsTracker = mht::Tracker<f64, FsFilter>;
pub type Estimate = statespace::HybridEstimate<f64>;
pub type Observation = statespace::Observation<f64>;
pub type Scan = statespace::Scan<f64>;
