//! Active link prediction in partially observed networks.
//!
//! A network with unknown node pairs is embedded by maximum likelihood on its
//! observed pairs; query strategies then score the unknown pairs, the best
//! ones are revealed by an oracle, and the loop repeats until the query
//! budget runs out.

pub mod campaign;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod pon;
pub mod strategy;
pub mod synth;
pub mod vopt;

pub use error::{AlpineError, Result};
