//! Invariant-manifold toolbox for the spatial circular restricted three-body
//! problem (RTBP) around the collinear points L1 and L2.
//!
//! The crate provides, end to end:
//!
//! * high-order Taylor parameterizations of the center-stable and
//!   center-unstable manifolds of L1/L2, computed order by order with the
//!   parameterization method in a mixed style that uncouples the center from
//!   the hyperbolic directions ([`parameterize`]),
//! * meshing of iso-energetic slices of the center manifolds, organized as
//!   deformed solid ellipsoids, with several root-bracketing strategies of
//!   very different cost ([`slicing`]),
//! * globalization of the associated stable/unstable fibers and the
//!   computation of whole sets of heteroclinic connections between the L1 and
//!   L2 center manifolds through a Poincaré-section matching stage and a
//!   min-norm multiple-shooting Newton refinement ([`connect`]).
//!
//! Supporting layers: dense truncated multivariate power series
//! ([`polyalg`]), the RTBP vector field / Hamiltonian / linear frames
//! ([`dynamics`]), a Runge-Kutta-Fehlberg 7(8) propagator with event
//! detection and variational equations ([`propagate`]), rank-revealing
//! min-norm least squares ([`linalg`]), and plain-text I/O for every artifact
//! ([`io`]).

pub mod dd;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod polyalg;
pub mod propagate;
pub mod slicing;

pub mod connect;
pub mod parameterize;

pub use error::{Error, Result};
