//! Simulation library for grant-free massive access in multi-cell networks.
//!
//! The library generates synthetic multi-cell uplink scenarios (hexagonal
//! layout, sporadic user activity, multipath MIMO channels, Gaussian pilots),
//! recovers user activity and channels with an MMV-AMP solver, and compares
//! three processing deployments:
//!
//! * **cloud** — all access-point observations are concatenated and solved as
//!   one global problem with row-common sparsity refinement,
//! * **fog** — each access point solves its local problem and cooperates with
//!   the `N_co` nearest neighbours of each user to refine sparsity ratios,
//! * **baseline** — each cell solves only for its own users, treating
//!   inter-cell interference as noise.
//!
//! [`harness`] drives seeded Monte-Carlo experiments over these deployments
//! and writes CSV/JSON result tables; the `massive-access` binary is the CLI
//! front end.

pub mod amp;
pub mod cloud;
pub mod detect;
pub mod error;
pub mod fog;
pub mod harness;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
