//! Desk-scale simulator for federated graph recommendation.
//!
//! Clients hold private user-item interactions and train embedding vectors
//! jointly with a coordinating server. Item embeddings are augmented by
//! lazily refreshed propagation layers ("latent" embeddings) that summarize
//! multi-hop connectivity, and every client upload crosses a simulated
//! secure-aggregation channel, so the server only ever sees sums.
//!
//! The crate is organized as a library plus a `fedrec` command-line driver:
//!
//! * [`dataset`]: bipartite interaction graphs, text loaders, synthetic data
//! * [`embedding`]: layered embedding containers, aggregation, scoring
//! * [`secagg`]: fixed-point encoding and pairwise-mask secure summation
//! * [`client`] / [`server`]: the two protocol roles
//! * [`protocol`]: epoch orchestration and full experiment runs
//! * [`oracle`]: dense centralized propagation used as a correctness reference
//! * [`eval`]: top-N ranking metrics
//! * [`checkpoint`]: bit-exact binary state snapshots
//! * [`cli`]: command implementations behind the binary

pub mod checkpoint;
pub mod cli;
pub mod client;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod protocol;
pub mod rng;
pub mod secagg;
pub mod server;

pub use error::{Error, Result};
