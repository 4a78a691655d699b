//! Max-min training over learned data partitions.
//!
//! The library alternates two steps on top of a small deterministic MLP
//! stack: a partition head is trained by gradient ascent to split the
//! training data into subsets where the frozen feature extractor performs
//! worst (per-subset supervised contrastive loss plus cross-subset
//! variance), and the extractor plus classifier are then trained to
//! minimize per-subset cross-entropy plus variance over every recorded
//! partition. A registry keeps the six highest-scoring partitions found
//! over training.
//!
//! Everything is framework-free f64 with analytic gradients checked
//! against central finite differences, and fully deterministic for a
//! given seed: same inputs, same bytes out.

pub mod dataio;
pub mod error;
pub mod faireval;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod partitioner;
pub mod rng;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
