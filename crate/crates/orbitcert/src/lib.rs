//! Certification toolkit for limit cycles of polynomial autonomous systems.
//!
//! The crate searches for and verifies transverse contraction metrics:
//! state-dependent quadratic forms whose decrease along the variational
//! dynamics, restricted to directions transversal to the flow, certifies
//! the existence, uniqueness, and orbital stability of a limit cycle.
//! Certificates are synthesized by sampled semidefinite feasibility and
//! then verified pointwise on dense grids, and can be cross-validated
//! against direct simulation: Poincare return maps, bifurcation scans,
//! and disturbance tubes.

pub mod certcheck;
pub mod error;
pub mod linalg;
pub mod poly;
pub mod polymat;
pub mod sdpfeas;
pub mod simlab;
pub mod synth;
pub mod sysmodel;

pub use error::{Error, Result};
