//! Physics-guided inductive spatiotemporal kriging.
//!
//! A TCN encodes each node's meteorology, emissions and (masked) pollution
//! history; diffusion and wind-driven advection operators propagate the
//! encodings across a distance-thresholded graph; readouts estimate
//! concentrations at nodes that have no monitor. Training masks random
//! stations, so the learned parameters never depend on the node set.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod baselines;
pub mod diffcore;
pub mod error;
pub mod geo_graph;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = diffcore::Tensor<f64>;
pub type Tape = diffcore::Tape<f64>;
pub type SparseMatrix = diffcore::SparseMatrix<f64>;
pub type ParamStore = diffcore::ParamStore<f64>;
pub type NodeSet = geo_graph::NodeSet<f64>;
pub type GraphOperators = geo_graph::GraphOperators<f64>;
pub type Model = model::Model<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
pub type Dataset = trainer::Dataset<f64>;

pub type Tensor32 = diffcore::Tensor<f32>;
pub type Tape32 = diffcore::Tape<f32>;
pub type Model32 = model::Model<f32>;
pub type Dataset32 = trainer::Dataset<f32>;
