//! Joint entity and relation extraction with span pruning, levitated markers
//! and higher-order hypergraph inference.

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod gcn;
pub mod hypergraph;
pub mod instance;
pub mod layers;
pub mod metrics;
pub mod mfvi;
pub mod model;
pub mod packing;
pub mod persist;
pub mod pipeline;
pub mod pruner;
pub mod store;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
