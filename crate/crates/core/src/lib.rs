pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod numeric;
pub mod pipeline;
pub mod predictor;
pub mod scaling;
pub mod search;
pub mod seeds;
pub mod sim;
pub mod stats;
