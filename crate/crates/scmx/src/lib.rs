//! Desk-scale mixture-of-experts transformer inference.
//!
//! The crate builds small randomly initialized MoE decoder models, runs them
//! under pluggable expert-routing strategies (top-k, rank-k, random-1,
//! dynamic-threshold, with optional always-on shared experts), and decodes
//! with a family of algorithms centered on self-contrast MoE (SCMoE): the
//! next token is scored by contrasting the logits of a strong activation
//! against a weak activation of the same model. Baselines (greedy,
//! temperature sampling, ensemble/dynamic routing, contrastive decoding with
//! an amateur checkpoint, DoLa, contrastive search) and analysis tooling
//! (per-position KL-divergence heatmaps, token-class aggregation,
//! unchosen-expert utilization, latency benchmarking) round out the suite.
//!
//! Everything is deterministic given a seed: reductions use a fixed
//! accumulation order and all randomness flows through seeded ChaCha
//! generators, so repeated runs are bit-identical. The `parallel` feature
//! (on by default) parallelizes independent work items with rayon without
//! affecting results; disabling it yields a fully sequential build.

pub mod analysis;
pub mod decoding;
pub mod error;
pub mod io;
pub mod linalg;
pub mod math;
pub mod model;
pub mod par;
pub mod routing;

pub use error::{Error, Result};
