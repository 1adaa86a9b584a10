//! Beam scheduling for device-to-device mmWave networks.
//!
//! The crate covers scenario and channel simulation, the graph features fed
//! to a learned scheduler, the scheduler itself with its analytic gradient
//! and primal-dual training loop, plus the classical baselines it is compared
//! against (greedy, exhaustive search, successive convex approximation).

pub mod baselines;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod gblinks;
pub mod grad;
pub mod graph;
pub mod ldlf;
pub mod problem;
pub mod rng;
pub mod sample;
pub mod sca;

pub use error::{Error, Result};
