//! Semi-hypercube routers: construction and validation of (k,d,τ)-semi-hypercubes,
//! oblivious and deterministic routing, worst-case self-pruning under adversarial
//! deletions, pruning of general graphs through embeddings, and an experiment harness.

pub mod balance;
pub mod dynroute;
pub mod embed;
pub mod error;
pub mod graph;
pub mod harness;
pub mod label;
pub mod lowerbound;
pub mod prune;
pub mod rng;
pub mod route;
pub mod trie;
pub mod validate;

pub use error::{Error, Result};
pub use graph::SemiHypercube;
pub use label::{Cluster, Universe, Vertex};
pub use rng::SplitRng;
pub use trie::VertexTrie;
